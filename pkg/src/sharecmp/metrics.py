"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import numpy as np

IGNORE_INDEX = 255


class ConfusionMatrix:
    """Cls x Cls pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        target = np.asarray(target).reshape(-1).astype(np.int64)
        if pred.shape != target.shape:
            raise ValueError("prediction and target sizes differ")
        keep = target != IGNORE_INDEX
        pred, target = pred[keep], target[keep]
        n = self.num_classes
        if target.size and (target.max() >= n or target.min() < 0 or pred.max() >= n or pred.min() < 0):
            raise ValueError(f"class ids must lie in [0, {n})")
        self.counts += np.bincount(target * n + pred, minlength=n * n).reshape(n, n)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else float("nan")

    def pixel_accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()
