"""Segmentation metrics: confusion-matrix IoU with ignore handling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .cam import IGNORE


@dataclass
class IoUReport:
    """Per-class IoU (NaN where a class never appears) and their mean."""

    per_class_iou: np.ndarray  # length class_count
    miou: float


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def confusion_matrix(preds, gts, class_count: int) -> np.ndarray:
    """Accumulate a class_count x class_count matrix, skipping IGNORE pixels.

    Positions where either side carries the IGNORE value do not count.
    Rows index ground truth, columns predictions.
    """
    p = _to_numpy(preds).reshape(-1)
    g = _to_numpy(gts).reshape(-1)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: preds {p.shape} vs gts {g.shape}")
    valid = (p != IGNORE) & (g != IGNORE)
    p, g = p[valid], g[valid]
    if ((p < 0) | (p >= class_count)).any() or ((g < 0) | (g >= class_count)).any():
        raise ValueError(f"labels outside [0, {class_count}) and not IGNORE")
    idx = g.astype(np.int64) * class_count + p.astype(np.int64)
    return np.bincount(idx, minlength=class_count * class_count).reshape(
        class_count, class_count
    )


def miou_from_confusion(cm: np.ndarray) -> IoUReport:
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    mean = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return IoUReport(per_class_iou=iou, miou=mean)


def miou(preds, gts, class_count: int) -> IoUReport:
    """IoU per class and mean over classes with nonzero union.

    ``preds``/``gts`` may be single grids or sequences of grids (a dataset);
    pixel values are 0 for background, 1..c for classes, IGNORE to skip.
    """
    if isinstance(preds, (list, tuple)):
        cm = np.zeros((class_count, class_count), dtype=np.int64)
        for p, g in zip(preds, gts, strict=True):
            cm += confusion_matrix(p, g, class_count)
    else:
        cm = confusion_matrix(preds, gts, class_count)
    return miou_from_confusion(cm)
