from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from classnet import ClassNet, ResponseMap, spatial_class_probability
from config import RunConfig, write_resolved_config
from diffcore import AdamState, Tape, Tensor, adam_step, load_checkpoint, save_checkpoint, zero_grad
from errors import ConfigError, NonFiniteLossError
from evalkit import exact_match_accuracy
from logger import logger
from mixaug import augment_arrays, mix_batch, sample_lambda
from models import LossBreakdown, TrainingSummary
from objective import (
    classification_loss,
    combine,
    concentration_loss_batch,
    entropy_loss,
    total_loss,
    valid_mask,
)

LOSS_LOG_NAME = "loss_log.csv"
LOSS_LOG_HEADER = "step,cls,ent,con,total,lambda_mix"
CHECKPOINT_DIR = "checkpoints"
SUMMARY_NAME = "training_summary.json"

# RNG stream tags; dataset generation uses 0 (train) and 1 (val)
EPOCH_STREAM = 2
AUGMENT_STREAM = 3


def checkpoint_path(out_dir: Union[str, Path], epoch: int) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"epoch_{epoch:03d}.mxcm"


class TrainingService:
    """
    Online mixup training of ClassNet on image-level labels.

    Receives the training view (images, labels) only; masks never reach
    this class. Every epoch writes a checkpoint holding parameters, Adam
    state and the (epoch, global step) position, which is all a resumed run
    needs to replay the same subsequent steps.
    """

    def __init__(
        self,
        config: RunConfig,
        train_view: Tuple[np.ndarray, np.ndarray],
        val_view: Optional[Tuple[np.ndarray, np.ndarray]] = None,
        out_dir: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ):
        self.config = config
        self.images, self.labels = train_view
        self.val_view = val_view
        self.out_dir = Path(out_dir or config.out_dir)
        self.progress = progress

        self.augment = config.augment_config()
        self.weights = config.loss_weights()
        net_config = config.net_config()
        expected = (net_config.in_channels, net_config.image_size, net_config.image_size)
        if self.images.shape[1:] != expected or self.labels.shape[1:] != (net_config.num_classes,):
            raise ConfigError(
                f"training data {self.images.shape[1:]} with {self.labels.shape[1:]} labels does not match "
                f"the configured network {expected} with {net_config.num_classes} classes"
            )
        self.net = ClassNet(net_config, seed=config.seed)
        self.adam = AdamState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
        self.epoch = 0
        self.global_step = 0
        self.last_loss: Optional[LossBreakdown] = None

    @property
    def steps_per_epoch(self) -> int:
        # partial final batches are dropped
        return len(self.images) // self.config.batch_size

    # ==================== RESUME ====================

    def resume(self, path: Union[str, Path]):
        """Restore parameters, Adam state and position from an epoch checkpoint."""
        logger.info(f"🔁 Resuming from {path}")
        checkpoint = load_checkpoint(path)
        self.net.load_state_dict(checkpoint.params)
        if checkpoint.adam is None:
            raise ConfigError(f"{path}: checkpoint has no optimizer state to resume from")
        self.adam = checkpoint.adam
        self.epoch = int(checkpoint.meta.get("epoch", 0))
        self.global_step = int(checkpoint.meta.get("global_step", 0))
        logger.info(f"✅ Resumed at epoch {self.epoch}, step {self.global_step}")

    # ==================== STEPS ====================

    def _augmented_batch(self, indices: np.ndarray, epoch: int) -> np.ndarray:
        batch = []
        for index in indices:
            rng = np.random.default_rng([self.config.seed, AUGMENT_STREAM, epoch, int(index)])
            image, _ = augment_arrays(self.images[index], None, self.augment, rng)
            batch.append(image)
        return np.stack(batch)

    def train_step(self, images: np.ndarray, soft_labels: np.ndarray) -> LossBreakdown:
        """Forward, L_all, backward and one Adam update on a prepared batch."""
        with Tape() as tape:
            logits, cam = self.net.forward(Tensor(images))
            cls = classification_loss(logits, soft_labels)
            ent = entropy_loss(spatial_class_probability(ResponseMap(raw=cam)))
            con = concentration_loss_batch(cam, valid_mask(soft_labels))
            total = combine(cls, ent, con, self.weights)

        value = total.item()
        if not np.isfinite(value):
            logger.error(f"❌ Non-finite loss {value} at step {self.global_step}")
            raise NonFiniteLossError(self.global_step, value)
        tape.backward(total)

        params = self.net.parameters()
        adam_step(params, self.adam)
        zero_grad(params)
        return total_loss(cls.item(), ent.item(), con.item(), self.weights)

    def _run_epoch(self, epoch: int, log_handle) -> Optional[LossBreakdown]:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, EPOCH_STREAM, epoch])
        order = rng.permutation(len(self.images))
        breakdown = None
        bar = tqdm(
            range(self.steps_per_epoch),
            desc=f"epoch {epoch + 1}/{cfg.epochs}",
            disable=not self.progress,
        )
        for b in bar:
            indices = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images = self._augmented_batch(indices, epoch)
            labels = self.labels[indices]
            if self.augment.mixup:
                lam = sample_lambda(self.augment.alpha, rng)
                images, labels, _ = mix_batch(images, labels, lam, rng)
            else:
                lam = 1.0

            breakdown = self.train_step(images, labels)
            log_handle.write(
                f"{self.global_step},{breakdown.cls!r},{breakdown.ent!r},{breakdown.con!r},"
                f"{breakdown.total!r},{lam!r}\n"
            )
            logger.debug(f"step {self.global_step}: total={breakdown.total:.6f} lambda_mix={lam:.4f}")
            bar.set_postfix(loss=f"{breakdown.total:.4f}")
            self.global_step += 1
        log_handle.flush()
        return breakdown

    # ==================== RUN ====================

    def _open_log(self):
        path = self.out_dir / LOSS_LOG_NAME
        kept: List[str] = []
        if self.global_step and path.exists():
            # keep rows up to the resume point so the log matches an uninterrupted run
            for line in path.read_text(encoding="utf-8").splitlines()[1:]:
                if line and int(line.split(",", 1)[0]) < self.global_step:
                    kept.append(line)
        handle = path.open("w", encoding="utf-8")
        handle.write(LOSS_LOG_HEADER + "\n")
        for line in kept:
            handle.write(line + "\n")
        return handle

    def validation_accuracy(self) -> Optional[float]:
        if self.val_view is None or len(self.val_view[0]) == 0:
            return None
        images, labels = self.val_view
        return exact_match_accuracy(self.net.predict_proba(images), labels)

    def train(self) -> TrainingSummary:
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, self.out_dir)
        logger.info(
            f"🏋️ Training: {len(self.images)} images, {self.steps_per_epoch} steps/epoch, "
            f"epochs {self.epoch + 1}..{cfg.epochs}, mixup={'on' if self.augment.mixup else 'off'}"
        )
        if self.steps_per_epoch == 0:
            logger.warning(f"⚠️ Batch size {cfg.batch_size} exceeds the training set; no steps will run")

        checkpoint = checkpoint_path(self.out_dir, self.epoch) if self.epoch else None
        with self._open_log() as log_handle:
            for epoch in range(self.epoch, cfg.epochs):
                breakdown = self._run_epoch(epoch, log_handle)
                if breakdown is not None:
                    self.last_loss = breakdown
                self.epoch = epoch + 1
                checkpoint = save_checkpoint(
                    checkpoint_path(self.out_dir, self.epoch),
                    self.net.state_dict(),
                    self.adam,
                    {"epoch": self.epoch, "global_step": self.global_step, "seed": cfg.seed},
                )
                loss_text = f"{breakdown.total:.4f}" if breakdown else "n/a"
                logger.info(f"📈 Epoch {self.epoch}/{cfg.epochs} done - loss {loss_text} - saved {checkpoint.name}")

        accuracy = self.validation_accuracy()
        if accuracy is not None:
            logger.info(f"🎯 Validation exact-match accuracy: {accuracy:.4f}")

        summary = TrainingSummary(
            epochs_completed=self.epoch,
            steps=self.global_step,
            final_val_accuracy=accuracy,
            checkpoint=str(checkpoint) if checkpoint else "",
            last_loss=self.last_loss,
        )
        (self.out_dir / SUMMARY_NAME).write_text(summary.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"✅ Training complete: {summary.steps} steps, checkpoint {summary.checkpoint}")
        return summary
