"""
Scoring helpers for response maps: threshold/argmax pseudo labels, IoU from
confusion counts, coverage/uniformity diagnostics, calibration, and tabular
report output.
"""
import csv
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from classnet import ResponseMap, normalize_maps
from errors import LabelError, ShapeError
from imaging import resize
from logger import logger
from models import SHAPE_NAMES, IoUReport, PseudoLabelConfig, ResponseDiagnostics

COVERAGE_THRESHOLD = 0.5


class PseudoLabel(NamedTuple):
    mask: np.ndarray
    no_valid_classes: bool


def _normalized(response: ResponseMap) -> np.ndarray:
    normalized = response.normalized if response.normalized is not None else normalize_maps(response.raw)
    data = normalized.data
    if data.ndim != 3:
        raise ShapeError("normalized_map", [data.shape], "expected a single C×H×W map")
    return data


def _valid_list(valid: Optional[Iterable[int]], num_classes: int) -> List[int]:
    classes = sorted(set(int(c) for c in (valid or ())))
    if classes and (classes[0] < 0 or classes[-1] >= num_classes):
        raise LabelError(f"valid classes {classes} outside 0..{num_classes - 1}")
    return classes


# ==================== PSEUDO LABELS ====================

def pseudo_labels(
    response: ResponseMap,
    valid: Optional[Iterable[int]],
    cfg: PseudoLabelConfig,
    size: int,
) -> PseudoLabel:
    """
    size×size mask: argmax over valid classes of the upsampled normalized
    maps where that maximum reaches tau_bg, background (0) elsewhere.
    Class c is written as c + 1.
    """
    maps = _normalized(response)
    classes = _valid_list(valid, maps.shape[0])
    if not classes:
        logger.warning("⚠️ No valid classes for pseudo labels; returning an all-background mask")
        return PseudoLabel(np.zeros((size, size), dtype=np.uint8), True)

    upsampled = resize(maps[classes], size, size, cfg.upsample)
    best = np.argmax(upsampled, axis=0)
    peak = np.max(upsampled, axis=0)
    labels = np.asarray(classes, dtype=np.int64)[best] + 1
    mask = np.where(peak >= cfg.tau_bg, labels, 0).astype(np.uint8)
    return PseudoLabel(mask, False)


# ==================== IOU ====================

def iou(pred: np.ndarray, truth: np.ndarray, num_classes: Optional[int] = None) -> IoUReport:
    """Confusion-count IoU over background + num_classes labels."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError("iou", [pred.shape, truth.shape], "mask extents differ")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), truth.max(initial=0)))
    labels = num_classes + 1
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= labels):
        raise LabelError(f"mask values must lie in 0..{num_classes}")

    confusion = np.bincount(
        truth.ravel() * labels + pred.ravel(), minlength=labels * labels
    ).reshape(labels, labels)
    intersection = np.diag(confusion)
    pred_counts = confusion.sum(axis=0)
    truth_counts = confusion.sum(axis=1)
    union = pred_counts + truth_counts - intersection
    return IoUReport(
        intersection=intersection.tolist(),
        union=union.tolist(),
        pred_counts=pred_counts.tolist(),
        truth_counts=truth_counts.tolist(),
    )


# ==================== DIAGNOSTICS ====================

def response_diagnostics(
    response: ResponseMap,
    truth: np.ndarray,
    valid: Optional[Iterable[int]],
    upsample: str = "bilinear",
) -> ResponseDiagnostics:
    """
    Coverage: share of a class's ground-truth pixels with normalized
    response >= 0.5. Uniformity: 1 - std/mean of those responses, clamped
    to [0, 1]. Both averaged over valid classes that have truth pixels.
    """
    maps = _normalized(response)
    classes = _valid_list(valid, maps.shape[0])
    h, w = truth.shape
    coverage, uniformity = [], []
    for c in classes:
        pixels = truth == c + 1
        if not pixels.any():
            continue
        values = resize(maps[c], h, w, upsample)[pixels]
        coverage.append(float(np.mean(values >= COVERAGE_THRESHOLD)))
        mean = float(values.mean())
        spread = 1.0 - float(values.std()) / mean if mean > 0 else 0.0
        uniformity.append(min(1.0, max(0.0, spread)))
    if not coverage:
        return ResponseDiagnostics()
    return ResponseDiagnostics(
        coverage=float(np.mean(coverage)),
        uniformity=float(np.mean(uniformity)),
        classes_scored=len(coverage),
    )


# ==================== CLASSIFICATION QUALITY ====================

def exact_match_accuracy(probabilities: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Share of samples whose thresholded prediction matches every label entry."""
    if len(labels) == 0:
        return 0.0
    predicted = np.asarray(probabilities) >= threshold
    truth = np.asarray(labels) > 0.5
    return float(np.mean(np.all(predicted == truth, axis=1)))


def calibration_error(probabilities: np.ndarray, labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error over all (sample, class) sigmoid outputs."""
    probs = np.asarray(probabilities, dtype=np.float64).ravel()
    truth = np.asarray(labels, dtype=np.float64).ravel()
    if probs.shape != truth.shape:
        raise ShapeError("calibration_error", [probs.shape, truth.shape], "outputs and labels differ")
    if probs.size == 0:
        return 0.0
    index = np.minimum((probs * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        members = index == b
        if members.any():
            total += members.sum() / probs.size * abs(probs[members].mean() - truth[members].mean())
    return float(total)


# ==================== REPORTS ====================

def iou_rows(report: IoUReport, class_names: Sequence[str] = SHAPE_NAMES) -> List[Dict[str, object]]:
    """One row per label (background first) plus a summary row."""
    names = ["background"] + list(class_names[:report.num_labels - 1])
    rows = []
    for name, inter, union, value in zip(names, report.intersection, report.union, report.per_class_iou):
        rows.append({"class": name, "intersection": inter, "union": union, "iou": value})
    rows.append({"class": "mean", "intersection": None, "union": None, "iou": report.miou})
    return rows


def _as_dict(row: Union[Mapping[str, object], BaseModel]) -> Dict[str, object]:
    return row.model_dump() if isinstance(row, BaseModel) else dict(row)


def _cell(value, float_format: str) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return format(value, float_format)
    return str(value)


def format_table(rows: Sequence[Union[Mapping[str, object], BaseModel]], float_format: str = ".4f") -> str:
    """Column-aligned text table; the first row's keys define the columns."""
    dicts = [_as_dict(r) for r in rows]
    if not dicts:
        return ""
    columns = list(dicts[0].keys())
    cells = [[_cell(d.get(c), float_format) for c in columns] for d in dicts]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def write_csv(rows: Sequence[Union[Mapping[str, object], BaseModel]], path: Union[str, Path]) -> Path:
    dicts = [_as_dict(r) for r in rows]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        if dicts:
            writer = csv.DictWriter(handle, fieldnames=list(dicts[0].keys()))
            writer.writeheader()
            for d in dicts:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in d.items()})
    return path
