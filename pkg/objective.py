"""
Loss terms: multi-label classification, per-pixel class entropy, spatial
concentration of the class activation maps, and their weighted total.
"""
from typing import Iterable, Optional, Union

import numpy as np

from classnet import ResponseMap
from diffcore import Tensor, as_tensor
from diffcore import ops
from errors import EmptyClassSetError, LabelError, NormalizationError, ShapeError
from models import LossBreakdown, LossWeights

PROB_FLOOR = 1e-12
NORMALIZATION_TOL = 1e-6
MASS_EPS = 1e-12


# ==================== CLASSIFICATION ====================

def classification_loss(logits: Tensor, soft_label) -> Tensor:
    """
    Mean binary cross-entropy between sigmoid(logits) and soft targets.
    Computed as softplus(z) - y·z, which is exact for large |z|.
    """
    logits = as_tensor(logits)
    target = np.asarray(soft_label.data if isinstance(soft_label, Tensor) else soft_label, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError("classification_loss", [logits.shape, target.shape], "logits and labels differ")
    if not np.all(np.isfinite(target)) or target.min(initial=0.0) < 0.0 or target.max(initial=0.0) > 1.0:
        raise LabelError("soft labels must lie in [0, 1]")
    y = Tensor(target)
    return (ops.softplus(logits) - y * logits).mean()


# ==================== ENTROPY ====================

def entropy_loss(probabilities: Tensor) -> Tensor:
    """
    Mean over positions of -sum_c P log P (natural log), class axis -3.
    P is clamped at 1e-12 inside the log so 0·log 0 contributes 0.
    """
    probabilities = as_tensor(probabilities)
    if probabilities.ndim < 3:
        raise ShapeError("entropy_loss", [probabilities.shape], "expected (N,)C×H×W")
    sums = probabilities.data.sum(axis=-3)
    if sums.size and np.max(np.abs(sums - 1.0)) > NORMALIZATION_TOL:
        raise NormalizationError(
            f"class distributions must sum to 1 (worst deviation {np.max(np.abs(sums - 1.0)):.3g})"
        )
    per_pixel = -(probabilities * ops.log(probabilities, floor=PROB_FLOOR)).sum(axis=-3)
    return per_pixel.mean()


# ==================== CONCENTRATION ====================

def _normalized_coordinates(extent: int) -> np.ndarray:
    if extent <= 1:
        return np.zeros(extent)
    return np.arange(extent, dtype=np.float64) / (extent - 1)


def concentration_terms(raw: Tensor) -> Tensor:
    """
    Per-class concentration values over the trailing (C, H, W) axes.

    M_hat = ReLU(M) / spatial sum (all-zero when the sum is not above 1e-12),
    centers are M_hat-weighted means of [0, 1]-normalized coordinates, and the
    term is the M_hat-weighted squared distance to the center.
    """
    raw = as_tensor(raw)
    h, w = raw.shape[-2:]
    positive = ops.relu(raw)
    mass = positive.sum(axis=(-2, -1), keepdims=True)
    keep = (mass.data > MASS_EPS).astype(np.float64)
    m_hat = positive * Tensor(keep) / (mass + Tensor(1.0 - keep))

    rows = Tensor(_normalized_coordinates(h).reshape(h, 1))
    cols = Tensor(_normalized_coordinates(w).reshape(1, w))
    mu_h = (m_hat * rows).sum(axis=(-2, -1), keepdims=True)
    mu_w = (m_hat * cols).sum(axis=(-2, -1), keepdims=True)
    spread = (rows - mu_h) ** 2 + (cols - mu_w) ** 2
    return (spread * m_hat).sum(axis=(-2, -1))


def valid_mask(labels: np.ndarray) -> np.ndarray:
    """Classes with a positive (soft) label entry."""
    return (np.asarray(labels) > 0).astype(np.float64)


def concentration_loss_batch(raw: Tensor, valid: np.ndarray) -> Tensor:
    """Sum over valid classes, mean over the batch; raw is N×C×H×W, valid N×C."""
    raw = as_tensor(raw)
    valid = np.asarray(valid, dtype=np.float64)
    if raw.ndim != 4 or valid.shape != raw.shape[:2]:
        raise ShapeError("concentration_loss", [raw.shape, valid.shape], "expected N×C×H×W maps and N×C mask")
    terms = concentration_terms(raw)
    return (terms * Tensor(valid)).sum(axis=-1).mean()


def concentration_loss(response: Union[ResponseMap, Tensor], valid: Optional[Iterable[int]] = None) -> Tensor:
    """L_con of a single C×H×W map restricted to the valid class set."""
    raw = response.raw if isinstance(response, ResponseMap) else as_tensor(response)
    if valid is None and isinstance(response, ResponseMap):
        valid = response.valid
    classes = sorted(set(int(c) for c in (valid or ())))
    if not classes:
        raise EmptyClassSetError("concentration loss needs at least one valid class")
    if raw.ndim != 3:
        raise ShapeError("concentration_loss", [raw.shape], "expected a single C×H×W map")
    num_classes = raw.shape[0]
    if classes[0] < 0 or classes[-1] >= num_classes:
        raise LabelError(f"valid classes {classes} outside 0..{num_classes - 1}")
    mask = np.zeros(num_classes)
    mask[classes] = 1.0
    return (concentration_terms(raw) * Tensor(mask)).sum()


# ==================== TOTAL ====================

def combine(cls: Tensor, ent: Tensor, con: Tensor, weights: LossWeights) -> Tensor:
    """Differentiable L_all = cls + lambda_ent·ent + lambda_con·con."""
    return cls + ent * weights.lambda_ent + con * weights.lambda_con


def total_loss(cls: float, ent: float, con: float, weights: LossWeights) -> LossBreakdown:
    cls, ent, con = float(cls), float(ent), float(con)
    total = cls + weights.lambda_ent * ent + weights.lambda_con * con
    return LossBreakdown(cls=cls, ent=ent, con=con, total=total)
