"""Confusion matrix, accuracy and macro precision/recall/F, Grad-CAM maps.

Scores are macro-averaged over the three quality classes (unweighted
class means).  Any zero denominator yields a score of 0 rather than
NaN, so multi-run aggregation never drops values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import imgproc
from .nnet import LabelOutOfRange


class LengthMismatch(ValueError):
    """True/predicted label sequences have different lengths."""


class EmptyMatrix(ValueError):
    """Metrics were requested for a confusion matrix with zero total."""


class UntrainedModel(RuntimeError):
    """Model parameters contain non-finite values."""


CLASS_COUNT = 3


def confusion_matrix(true_labels, predicted_labels, class_count: int = CLASS_COUNT) -> np.ndarray:
    """cm[i][j] = number of samples with true label i predicted as j."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if t.size != p.size:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    if t.size == 0:
        return cm
    if t.min() < 0 or t.max() >= class_count or p.min() < 0 or p.max() >= class_count:
        raise LabelOutOfRange(f"labels must lie in [0, {class_count})")
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f: tuple[float, ...]
    macro_precision: float
    macro_recall: float
    macro_f: float
    confusion: np.ndarray
    runs: tuple[float, ...] | None = None  # per-seed macro-F values, if any


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def metrics_from_cm(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has zero total")
    n = cm.shape[0]
    precision = tuple(_safe_div(float(cm[j, j]), float(cm[:, j].sum())) for j in range(n))
    recall = tuple(_safe_div(float(cm[i, i]), float(cm[i, :].sum())) for i in range(n))
    f = tuple(
        _safe_div(2.0 * p * r, p + r) for p, r in zip(precision, recall)
    )
    return MetricsReport(
        accuracy=float(np.trace(cm)) / total,
        precision=precision,
        recall=recall,
        f=f,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f=float(np.mean(f)),
        confusion=cm,
    )


def summarize_macro_f(values) -> tuple[float, float]:
    """Mean and sample standard deviation of macro-F across runs."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no runs to summarize")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "accuracy": report.accuracy,
        "per_class": {
            "precision": list(report.precision),
            "recall": list(report.recall),
            "f": list(report.f),
        },
        "macro": {
            "precision": report.macro_precision,
            "recall": report.macro_recall,
            "f": report.macro_f,
        },
        "confusion": report.confusion.tolist(),
    }
    if report.runs is not None:
        doc["runs"] = list(report.runs)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def format_report(report: MetricsReport) -> str:
    lines = [
        f"accuracy        {report.accuracy:.4f}",
        f"macro precision {report.macro_precision:.4f}",
        f"macro recall    {report.macro_recall:.4f}",
        f"macro F         {report.macro_f:.4f}",
        "confusion (rows = truth good/usable/reject):",
    ]
    for row in report.confusion:
        lines.append("  " + " ".join(f"{int(v):6d}" for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Grad-CAM
# ---------------------------------------------------------------------------


def weighted_cam(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum: the raw Grad-CAM map.

    Channel weights are the spatial means of the gradient; both inputs
    are (C, h, w).
    """
    if activation.shape != gradient.shape or activation.ndim != 3:
        raise ValueError(
            f"activation {activation.shape} and gradient {gradient.shape} must be equal (C,h,w)"
        )
    alpha = gradient.mean(axis=(1, 2))
    return np.maximum((alpha[:, None, None] * activation).sum(axis=0), 0.0)


def gradcam(model, image: np.ndarray, target_class: int) -> np.ndarray:
    """Class-discriminative heatmap at the input resolution, in [0, 1].

    Uses the last convolutional block's post-ReLU activation; the raw
    map is bilinearly upsampled and divided by its maximum (all zeros
    when the map is non-positive everywhere).
    """
    for _, p in model.params.items():
        if not np.all(np.isfinite(p.value)):
            raise UntrainedModel("model parameters contain non-finite values")
    if not 0 <= int(target_class) < model.cfg.class_count:
        raise LabelOutOfRange(f"class index {target_class} out of range")
    img = np.asarray(image)
    x = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=model.dtype)[None]
    act, grad = model.cam_components(x, int(target_class))
    raw = weighted_cam(act[0], grad[0])
    up = imgproc.resize_bilinear(raw.astype(np.float64), img.shape[0], img.shape[1])
    peak = float(up.max())
    return up / peak if peak > 0 else np.zeros_like(up)
