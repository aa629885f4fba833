"""Confusion-matrix segmentation metrics: per-class IoU/accuracy and their means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .losses import IGNORE_LABEL


@dataclass
class EvalReport:
    per_class_iou: np.ndarray    # NaN where the class is absent everywhere
    per_class_acc: np.ndarray
    mean_iou: float
    mean_acc: float
    pixel_counts: np.ndarray     # ground-truth pixels per class

    def summary(self, class_names=None) -> str:
        lines = [f"mIoU {self.mean_iou:.4f}  mAcc {self.mean_acc:.4f}"]
        for c, (iou, acc, n) in enumerate(
            zip(self.per_class_iou, self.per_class_acc, self.pixel_counts)
        ):
            name = class_names[c] if class_names else f"class{c}"
            if np.isnan(iou):
                lines.append(f"  {name:<12} absent")
            else:
                lines.append(f"  {name:<12} IoU {iou:.4f}  Acc {acc:.4f}  px {int(n)}")
        return "\n".join(lines)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows index ground truth, columns prediction; ignore pixels are dropped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    keep = truth != IGNORE_LABEL
    idx = truth[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    truth_total = cm.sum(axis=1)
    pred_total = cm.sum(axis=0)
    union = truth_total + pred_total - tp
    present = union > 0  # absent from both prediction and truth -> excluded
    iou = np.where(present, tp / np.where(union > 0, union, 1.0), np.nan)
    acc = np.where(truth_total > 0, tp / np.where(truth_total > 0, truth_total, 1.0), np.nan)
    acc = np.where(present & (truth_total == 0), 0.0, acc)  # predicted-only class: recall 0
    return EvalReport(
        per_class_iou=iou,
        per_class_acc=acc,
        mean_iou=float(np.nanmean(iou)) if present.any() else float("nan"),
        mean_acc=float(np.nanmean(acc)) if present.any() else float("nan"),
        pixel_counts=truth_total.astype(np.int64),
    )
