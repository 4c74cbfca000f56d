"""Training loop, evaluation, and single-image prediction.

Training follows the published regimen (Adam on soft Dice, batch size 2,
learning rate 1e-4, 100 epochs by default) with a seeded per-epoch shuffle so
runs are bit-reproducible.  Evaluation micro-averages one confusion matrix
over every pixel of every image; Dice coefficient/loss are soft sums over the
same pixels.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import SplitManifest, _lcg_permutation
from .errors import EmptyEvalSet, EmptyTrainSet, NonFiniteLoss, NonFiniteValue
from .image_core import BinaryMask, GrayImage, ManifestEntry, load_image, load_mask
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    SOFT_DICE_EPS,
    _confusion_arrays,
    efficacy_ratio_or_inf,
    hard_metrics,
)
from .tensor_nn import AdamState, adam_step, soft_dice_loss
from .unet import Model, save_checkpoint, unet_backward, unet_forward

DEFAULT_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    early_stop: int | None = None  # patience in epochs without a val-IoU improvement

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 1, batch_size >= 1, learning_rate > 0 required")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: MetricsReport | None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    train_time_s: float = 0.0
    best_epoch: int = 0


def _binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Shared prediction rule: positive iff probability >= threshold."""
    return (probs >= threshold).astype(np.uint8)


def _load_pair(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    img = load_image(entry.image)
    mask = load_mask(entry.mask)
    return img.data, mask.data.astype(np.float32)


def _epoch_seed(seed: int, epoch: int) -> int:
    # distinct, platform-stable stream per epoch
    return (seed * 1_000_003 + epoch) & 0xFFFFFFFFFFFFFFFF

def _evaluate_arrays(model: Model, pairs, threshold: float) -> MetricsReport:
    counts = ConfusionCounts(0, 0, 0, 0)
    inter = 0.0
    psum = 0.0
    tsum = 0.0
    for x, t in pairs:
        probs, _ = unet_forward(model, x[None, None], keep_cache=False)
        pred = _binarize(probs[0, 0], threshold)
        counts = counts + _confusion_arrays(pred, t)
        inter += float(np.sum(probs[0, 0].astype(np.float64) * t))
        psum += float(np.sum(probs[0, 0], dtype=np.float64))
        tsum += float(np.sum(t, dtype=np.float64))
    iou, acc, rec, _ = hard_metrics(counts)
    dc = (2.0 * inter + SOFT_DICE_EPS) / (psum + tsum + SOFT_DICE_EPS)
    dl = 1.0 - dc
    return MetricsReport(iou, acc, rec, dl, dc, 0.0, efficacy_ratio_or_inf(iou, dl))


def train(
    model: Model,
    split: SplitManifest,
    tc: TrainConfig,
    approach: str | None = None,
    checkpoint_dir=None,
) -> tuple[Model, TrainHistory]:
    """Train on the split's train list, validating per epoch on its val list.

    Returns the model holding the best-validation-IoU parameters (final
    parameters when there is no validation set) and the per-epoch history.
    The `approach` tag only asserts consistent preprocessing upstream; images
    are consumed as-is.
    """
    if not split.train:
        raise EmptyTrainSet("split has no training entries")
    train_pairs = [_load_pair(e) for e in split.train]
    val_pairs = [_load_pair(e) for e in split.val]

    adam = AdamState(lr=tc.learning_rate)
    history = TrainHistory()
    best_iou = -1.0
    best_params = None
    best_epoch = 0
    since_best = 0

    t0 = time.perf_counter()
    for epoch in range(1, tc.epochs + 1):
        order = _lcg_permutation(len(train_pairs), _epoch_seed(tc.seed, epoch))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            batch = order[start : start + tc.batch_size]
            x = np.stack([train_pairs[i][0] for i in batch])[:, None]
            t = np.stack([train_pairs[i][1] for i in batch])[:, None]
            try:
                probs, cache = unet_forward(model, x, keep_cache=True)
                loss, dprobs = soft_dice_loss(probs, t)
                if not math.isfinite(loss):
                    raise NonFiniteValue("loss")
                grads = unet_backward(model, cache, dprobs)
                model.params = adam_step(model.params, grads, adam)
            except NonFiniteValue as e:
                raise NonFiniteLoss(
                    f"non-finite value at epoch {epoch}, batch starting {start} ({e})"
                ) from e
            losses.append(loss)
        val_report = _evaluate_arrays(model, val_pairs, DEFAULT_THRESHOLD) if val_pairs else None
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), val_report))

        if val_report is not None and val_report.is_ > best_iou:
            best_iou = val_report.is_
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if checkpoint_dir is not None and tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
            save_checkpoint(model, adam, Path(checkpoint_dir) / f"checkpoint.epoch{epoch}.rseg")
        if tc.early_stop is not None and val_pairs and since_best >= tc.early_stop:
            break
    history.train_time_s = time.perf_counter() - t0

    if best_params is not None:
        model.params = best_params
        history.best_epoch = best_epoch
    else:
        history.best_epoch = len(history.records)
    return model, history


def evaluate(model: Model, entries: list[ManifestEntry], threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Micro-averaged metrics over every pixel of every entry.

    One confusion matrix is accumulated across all images and IoU/accuracy/
    recall come from it; Dice coefficient/loss are the soft sums over the same
    pixels.  TT is left 0.0 for the caller to fill from training history.
    """
    if not entries:
        raise EmptyEvalSet("nothing to evaluate")
    return _evaluate_arrays(model, (_load_pair(e) for e in entries), threshold)


def predict(model: Model, img: GrayImage, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Forward one image and binarize at `threshold` (rule: >=)."""
    probs, _ = unet_forward(model, img.data[None, None], keep_cache=False)
    return BinaryMask(_binarize(probs[0, 0], threshold))


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_is", "val_acc", "val_rec", "val_dl", "val_dc"])
        for r in history.records:
            if r.val is None:
                w.writerow([r.epoch, f"{r.train_loss:.8f}", "", "", "", "", ""])
            else:
                w.writerow(
                    [
                        r.epoch,
                        f"{r.train_loss:.8f}",
                        f"{r.val.is_:.6f}",
                        f"{r.val.acc:.6f}",
                        f"{r.val.rec:.6f}",
                        f"{r.val.dl:.6f}",
                        f"{r.val.dc:.6f}",
                    ]
                )
