"""Segmentation metrics: confusion counts, IoU/accuracy/recall, soft Dice,
and the Efficacy Ratio (IoU score divided by Dice loss).

Reported Dice coefficient/loss use the soft (probability) definition while
IoU, accuracy and recall come from hard thresholded counts; that split is the
only combination under which ER = IS / DL is self-consistent here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyConfusion, ShapeMismatch, ZeroDiceLoss
from .image_core import BinaryMask

SOFT_DICE_EPS = 1.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricsReport:
    """One result row: IoU, accuracy, recall, Dice loss/coefficient, training
    time in seconds, and the efficacy ratio."""

    is_: float
    acc: float
    rec: float
    dl: float
    dc: float
    tt: float
    er: float


def _confusion_arrays(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, tn, fn)


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Exact pixel counts with vessel (1) as the positive class."""
    if pred.data.shape != gt.data.shape:
        raise DimensionMismatch(f"{pred.data.shape} vs {gt.data.shape}")
    return _confusion_arrays(pred.data, gt.data)


def hard_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(IoU, accuracy, recall, hard Dice) from counts.

    Degenerate denominators (both sets empty) score 1.0, matching common
    library conventions.
    """
    if c.total <= 0:
        raise EmptyConfusion("no pixels evaluated")
    union = c.tp + c.fp + c.fn
    iou = c.tp / union if union else 1.0
    acc = (c.tp + c.tn) / c.total
    rec = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 1.0
    dice_den = 2 * c.tp + c.fp + c.fn
    hard_dice = 2 * c.tp / dice_den if dice_den else 1.0
    return iou, acc, rec, hard_dice


def efficacy_ratio(is_: float, dl: float) -> float:
    """IoU score divided by Dice loss."""
    if dl <= 0.0:
        raise ZeroDiceLoss("dice loss is zero; model is (near-)perfect")
    return is_ / dl


def efficacy_ratio_or_inf(is_: float, dl: float) -> float:
    """Table-friendly variant: +inf sentinel instead of raising on dl == 0."""
    try:
        return efficacy_ratio(is_, dl)
    except ZeroDiceLoss:
        return math.inf


def soft_dice_metric(probs: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(soft Dice coefficient, soft Dice loss) with the training-loss epsilon."""
    if probs.shape != gt.shape:
        raise ShapeMismatch(f"{probs.shape} vs {gt.shape}")
    inter = float(np.sum(probs * gt, dtype=np.float64))
    denom = float(np.sum(probs, dtype=np.float64)) + float(np.sum(gt, dtype=np.float64))
    dc = (2.0 * inter + SOFT_DICE_EPS) / (denom + SOFT_DICE_EPS)
    return dc, 1.0 - dc
