"""
Mixup of image/label pairs and the label-preserving augmentations applied to
each source image before mixing.
"""
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from imaging import resize_bilinear, resize_nearest
from models import AugmentConfig
from synthdata import SceneSample


@dataclass(frozen=True)
class MixupSample:
    image: np.ndarray
    label: np.ndarray
    lam: float
    sources: Tuple[int, int]

    @property
    def valid_classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.flatnonzero(self.label > 0))


# ==================== COEFFICIENT ====================

def _check_alpha(alpha: float):
    if not alpha > 0:
        raise ConfigError(f"mixup alpha must be > 0, got {alpha}")


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """
    One Beta(alpha, alpha) draw as X / (X + Y) with X, Y ~ Gamma(alpha, 1).
    Both Gamma draws can underflow to 0 for tiny alpha; that case returns 0.5.
    """
    _check_alpha(alpha)
    x = rng.standard_gamma(alpha)
    y = rng.standard_gamma(alpha)
    total = x + y
    if total == 0.0:
        return 0.5
    return float(x / total)


def sample_lambdas(alpha: float, rng: np.random.Generator, size: int) -> np.ndarray:
    _check_alpha(alpha)
    x = rng.standard_gamma(alpha, size)
    y = rng.standard_gamma(alpha, size)
    total = x + y
    safe = np.where(total > 0.0, total, 1.0)
    return np.where(total > 0.0, x / safe, 0.5)


# ==================== MIXING ====================

def _check_lambda(lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixing coefficient must lie in [0, 1], got {lam}")


def mixup(a: SceneSample, b: SceneSample, lam: float) -> MixupSample:
    """I' = lam·I1 + (1 - lam)·I2 and the same convex combination of labels."""
    _check_lambda(lam)
    if a.image.shape != b.image.shape:
        raise ShapeError("mixup", [a.image.shape, b.image.shape], "images differ")
    if a.label.shape != b.label.shape:
        raise ShapeError("mixup", [a.label.shape, b.label.shape], "labels differ")
    image = lam * a.image + (1.0 - lam) * b.image
    label = lam * a.label.astype(np.float64) + (1.0 - lam) * b.label.astype(np.float64)
    return MixupSample(image=image, label=label, lam=float(lam), sources=(a.sample_id, b.sample_id))


def mix_batch(
    images: np.ndarray, labels: np.ndarray, lam: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mix every sample with a partner drawn by shuffling the minibatch.
    Returns (mixed images, soft labels, partner permutation).
    """
    _check_lambda(lam)
    if len(images) != len(labels):
        raise ShapeError("mix_batch", [images.shape, labels.shape], "batch sizes differ")
    perm = rng.permutation(len(images))
    mixed = lam * images + (1.0 - lam) * images[perm]
    soft = lam * labels + (1.0 - lam) * labels[perm]
    return mixed, soft, perm


# ==================== LABEL-PRESERVING ====================

def augment_arrays(
    image: np.ndarray, mask: Optional[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Horizontal flip, rescale, crop back to the original extent and color
    jitter. The mask, when given, follows every geometric step.
    """
    size = image.shape[-1]
    has_mask = mask is not None

    if rng.random() < cfg.flip_prob:
        image = image[..., ::-1]
        if has_mask:
            mask = mask[..., ::-1]

    scale = rng.uniform(*cfg.scale_range)
    crop_fraction = rng.uniform(*cfg.crop_range)
    scaled = max(1, int(round(size * scale)))
    crop = max(1, int(round(size * crop_fraction)))
    if crop > scaled:
        raise ConfigError(f"crop larger than image: crop {crop}px from a {scaled}px rescaled image")
    if scaled != size:
        image = resize_bilinear(image, scaled, scaled)
        if has_mask:
            mask = resize_nearest(mask, scaled, scaled)

    top = int(rng.integers(0, scaled - crop + 1))
    left = int(rng.integers(0, scaled - crop + 1))
    image = image[..., top:top + crop, left:left + crop]
    if has_mask:
        mask = mask[..., top:top + crop, left:left + crop]
    if crop != size:
        image = resize_bilinear(image, size, size)
        if has_mask:
            mask = resize_nearest(mask, size, size)

    if cfg.jitter > 0:
        gain = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter, size=(3, 1, 1))
        offset = rng.uniform(-cfg.jitter / 2, cfg.jitter / 2, size=(3, 1, 1))
        image = np.clip(image * gain + offset, 0.0, 1.0)

    image = np.ascontiguousarray(image)
    return image, (np.ascontiguousarray(mask) if has_mask else None)


def label_preserving_augment(sample: SceneSample, cfg: AugmentConfig, rng: np.random.Generator) -> SceneSample:
    """Augmented copy of `sample` with the same label."""
    image, mask = augment_arrays(sample.image, sample.mask, cfg, rng)
    return replace(sample, image=image, mask=mask)
