"""Segmentation quality metrics over a pooled confusion matrix.

IoU, Dice, and the confusion ratio (false positives over true positives,
the false-activation indicator) are computed per class from one global
confusion matrix; the mean IoU includes the background class, while Dice
and confusion-ratio summaries cover foreground classes only. Predictions
may abstain with the ignore value, which costs recall (a false negative
for the ground-truth class) but never precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .refine import IGNORE
from .tensor import ParameterError


@dataclass
class MetricsReport:
    per_class_iou: list          # background first; None where class absent
    miou: float
    per_class_dice: list         # foreground classes; None where absent
    macro_dsc: float
    per_class_cr: list           # foreground classes; None where TP = 0
    mean_cr: float | None
    tp: list
    fp: list
    fn: list

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "per_class_dice": self.per_class_dice,
            "macro_dsc": self.macro_dsc,
            "per_class_cr": self.per_class_cr,
            "mean_cr": self.mean_cr,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


class ConfusionMatrix:
    """(M+1) x (M+1) pixel counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_labels: int):
        if num_labels < 2:
            raise ParameterError(f"need background plus classes, got {num_labels} labels")
        self.num_labels = num_labels
        self.counts = np.zeros((num_labels, num_labels), dtype=np.int64)
        self.abstained = np.zeros(num_labels, dtype=np.int64)

    def update(self, prediction: np.ndarray, gt: np.ndarray):
        pred = np.asarray(prediction).reshape(-1)
        truth = np.asarray(gt).reshape(-1)
        if pred.shape != truth.shape:
            raise ParameterError(f"prediction {pred.shape} does not match gt {truth.shape}")
        keep = truth != IGNORE
        pred, truth = pred[keep], truth[keep]
        abstain = pred == IGNORE
        if abstain.any():
            self.abstained += np.bincount(truth[abstain], minlength=self.num_labels)
            pred, truth = pred[~abstain], truth[~abstain]
        if pred.size and (pred.max() >= self.num_labels or truth.max() >= self.num_labels):
            raise ParameterError("label outside the confusion matrix range")
        flat = truth * self.num_labels + pred
        self.counts += np.bincount(flat, minlength=self.num_labels**2).reshape(
            self.num_labels, self.num_labels
        )

    def total(self) -> int:
        return int(self.counts.sum() + self.abstained.sum())

    def report(self) -> MetricsReport:
        tp = np.diag(self.counts).astype(float)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp + self.abstained

        present = (self.counts.sum(axis=1) + self.abstained) > 0
        iou, dice, cr = [], [], []
        for c in range(self.num_labels):
            denom = tp[c] + fp[c] + fn[c]
            iou.append(tp[c] / denom if present[c] and denom > 0 else None)
            if c == 0:
                continue
            ddenom = 2 * tp[c] + fp[c] + fn[c]
            dice.append(tp[c] / ddenom * 2 if present[c] and ddenom > 0 else None)
            cr.append(fp[c] / tp[c] if tp[c] > 0 else None)

        scored = [v for v in iou if v is not None]
        dsc_scored = [v for v in dice if v is not None]
        cr_scored = [v for v in cr if v is not None]
        return MetricsReport(
            per_class_iou=iou,
            miou=float(np.mean(scored)) if scored else 0.0,
            per_class_dice=dice,
            macro_dsc=float(np.mean(dsc_scored)) if dsc_scored else 0.0,
            per_class_cr=cr,
            mean_cr=float(np.mean(cr_scored)) if cr_scored else None,
            tp=tp.astype(int).tolist(),
            fp=fp.astype(int).tolist(),
            fn=fn.astype(int).tolist(),
        )


def score_masks(predictions, gts, num_labels: int) -> MetricsReport:
    """Pool a sequence of (prediction, gt) mask pairs into one report."""
    cm = ConfusionMatrix(num_labels)
    for pred, gt in zip(predictions, gts):
        cm.update(pred, gt)
    return cm.report()
