from concurrent.futures import ThreadPoolExecutor
from functools import reduce
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from classnet import ClassNet, ResponseMap, export_normalized_pgms, normalize_maps, write_response_map
from config import RunConfig
from diffcore import Tensor, load_checkpoint, no_grad
from errors import ConfigError
from evalkit import (
    calibration_error,
    exact_match_accuracy,
    iou,
    iou_rows,
    pseudo_labels,
    response_diagnostics,
    write_csv,
)
from imaging import write_pgm, write_ppm
from logger import logger
from models import EvaluationReport, IoUReport, PseudoLabelConfig, ResponseDiagnostics
from synthdata import SceneSample, SceneSplit

TAU_SWEEP = tuple(round(0.1 * k, 1) for k in range(1, 10))
REPORT_NAME = "eval_report.json"
IOU_CSV_NAME = "eval_iou.csv"
SWEEP_CSV_NAME = "tau_sweep.csv"


def load_net(checkpoint: Union[str, Path], config: RunConfig) -> ClassNet:
    """ClassNet with the architecture from `config` and weights from `checkpoint`."""
    net = ClassNet(config.net_config(), seed=config.seed)
    net.load_state_dict(load_checkpoint(checkpoint).params)
    logger.info(f"📦 Loaded checkpoint {checkpoint} ({net.num_parameters()} parameters)")
    return net


class EvaluationService:
    """
    Scores CAM pseudo labels against ground-truth masks.

    Maps are computed once per split in batches; per-sample scoring fans out
    over a thread pool and the IoU counts merge associatively, so the report
    does not depend on scheduling.
    """

    def __init__(
        self,
        net: ClassNet,
        pseudo_config: PseudoLabelConfig,
        workers: int = 1,
        batch_size: int = 64,
        progress: bool = False,
    ):
        self.net = net
        self.pseudo_config = pseudo_config
        self.workers = max(1, workers)
        self.batch_size = batch_size
        self.progress = progress

    def _check_split(self, split: SceneSplit):
        cfg = self.net.config
        if split.num_classes != cfg.num_classes or split.image_size != cfg.image_size:
            raise ConfigError(
                f"dataset has {split.num_classes} classes at {split.image_size}px but the model expects "
                f"{cfg.num_classes} classes at {cfg.image_size}px"
            )

    # ==================== MAPS ====================

    def normalized_maps(self, images: np.ndarray) -> np.ndarray:
        """N×C×H_f×W_f max-normalized CAMs, computed without a tape."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), self.batch_size):
                features = self.net.extract_features(Tensor(images[start:start + self.batch_size]))
                chunks.append(normalize_maps(self.net.cam_from_features(features)).data)
        if not chunks:
            cfg = self.net.config
            return np.zeros((0, cfg.num_classes, cfg.feature_size, cfg.feature_size))
        return np.concatenate(chunks, axis=0)

    def response_for(self, sample: SceneSample) -> ResponseMap:
        with no_grad():
            response = self.net.cam_raw(Tensor(sample.image), valid=sample.classes)
            response.normalized = normalize_maps(response.raw)
        return response

    # ==================== SCORING ====================

    def _score(self, sample: SceneSample, normalized: np.ndarray, tau_bg: float) -> Tuple[IoUReport, ResponseDiagnostics]:
        response = ResponseMap(raw=Tensor(normalized), normalized=Tensor(normalized), valid=sample.classes)
        cfg = self.pseudo_config.model_copy(update={"tau_bg": tau_bg})
        mask, _ = pseudo_labels(response, sample.classes, cfg, sample.mask.shape[-1])
        report = iou(mask, sample.mask, self.net.config.num_classes)
        diagnostics = response_diagnostics(response, sample.mask, sample.classes, cfg.upsample)
        return report, diagnostics

    def _score_split(self, split: SceneSplit, maps: np.ndarray, tau_bg: float):
        def score(index: int):
            return self._score(split.samples[index], maps[index], tau_bg)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results = list(tqdm(
                pool.map(score, range(len(split))),
                total=len(split),
                desc=f"eval tau={tau_bg}",
                disable=not self.progress,
            ))
        total = reduce(lambda a, b: a.merge(b), (r[0] for r in results), IoUReport.empty(split.num_classes + 1))
        scored = [r[1] for r in results if r[1].classes_scored > 0]
        coverage = float(np.mean([d.coverage for d in scored])) if scored else 0.0
        uniformity = float(np.mean([d.uniformity for d in scored])) if scored else 0.0
        return total, coverage, uniformity

    def evaluate(self, split: SceneSplit, tau_bg: Optional[float] = None) -> EvaluationReport:
        """cam -> normalize -> pseudo labels -> IoU + diagnostics over `split`."""
        self._check_split(split)
        tau_bg = self.pseudo_config.tau_bg if tau_bg is None else tau_bg
        logger.info(f"🔍 Evaluating {len(split)} {split.name} samples (tau_bg={tau_bg})")

        images, labels = split.training_view()
        maps = self.normalized_maps(images)
        total, coverage, uniformity = self._score_split(split, maps, tau_bg)
        probabilities = self.net.predict_proba(images, self.batch_size)

        report = EvaluationReport(
            samples=len(split),
            tau_bg=tau_bg,
            iou=total,
            coverage=coverage,
            uniformity=uniformity,
            accuracy=exact_match_accuracy(probabilities, labels),
            calibration_error=calibration_error(probabilities, labels),
        )
        logger.info(
            f"✅ mIoU {report.iou.miou:.4f} - coverage {coverage:.4f} - uniformity {uniformity:.4f} "
            f"- accuracy {report.accuracy:.4f}"
        )
        return report

    def tau_sweep(self, split: SceneSplit, taus: Sequence[float] = TAU_SWEEP) -> List[Dict[str, object]]:
        """One row per tau_bg with mIoU and the predicted background pixel count."""
        self._check_split(split)
        logger.info(f"🔍 Sweeping tau_bg over {len(taus)} values")
        maps = self.normalized_maps(split.images())
        rows = []
        for tau in taus:
            total, coverage, uniformity = self._score_split(split, maps, tau)
            rows.append({
                "tau_bg": float(tau),
                "miou": total.miou,
                "background_pixels": total.pred_counts[0],
                "coverage": coverage,
                "uniformity": uniformity,
            })
        return rows

    # ==================== OUTPUT ====================

    def write_report(self, report: EvaluationReport, out_dir: Union[str, Path]) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / REPORT_NAME
        json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        return [json_path, write_csv(iou_rows(report.iou), out_dir / IOU_CSV_NAME)]

    def export_cam(self, sample: SceneSample, out_dir: Union[str, Path]) -> List[Path]:
        """Input PPM, per-class 16-bit CAM PGMs, pseudo-label PGM and raw MXRM dump."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"sample_{sample.sample_id:05d}"
        response = self.response_for(sample)
        mask, empty = pseudo_labels(response, sample.classes, self.pseudo_config, sample.image.shape[-1])
        if empty:
            logger.warning(f"⚠️ Sample {sample.sample_id} has no labelled classes; pseudo label is all background")

        paths = [write_ppm(out_dir / f"{stem}.ppm", sample.image)]
        paths.extend(export_normalized_pgms(response, out_dir, stem))
        paths.append(write_pgm(out_dir / f"{stem}_pseudo.pgm", mask))
        paths.append(write_response_map(out_dir / f"{stem}.mxrm", response))
        logger.info(f"🖼️ Exported {len(paths)} files for sample {sample.sample_id}")
        return paths
