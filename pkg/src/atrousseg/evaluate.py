"""Inference strategies (output stride, multi-scale, flip) and mean IOU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .dataset import IGNORE_LABEL
from .norm import BNMode
from .tensor import bilinear_resize, flip_lr, softmax

PAPER_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass(frozen=True)
class InferenceConfig:
    eval_os: int = 8
    scales: Tuple[float, ...] = (1.0,)
    flip: bool = False

    def __post_init__(self):
        if self.eval_os not in (8, 16, 32):
            raise ValueError(f"eval_os must be 8, 16 or 32, got {self.eval_os}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be a non-empty list of positive values, got {self.scales}")


def aligned_size(size: int, scale: float, align: int) -> int:
    """Nearest size of the form N*align+1 to ``scale * (size - 1) + 1`` (ties round up)."""
    blocks = math_floor_half_up(scale * (size - 1) / align)
    if blocks < 1:
        raise ValueError(f"scale {scale} shrinks a {size}-pixel side below one aligned block ({align + 1} px)")
    return blocks * align + 1


def math_floor_half_up(v: float) -> int:
    return int(np.floor(v + 0.5 + 1e-9))


def predict_probs(model, images: np.ndarray, cfg: InferenceConfig) -> np.ndarray:
    """Class probabilities at input resolution, averaged over scales and flips.

    ``images`` is (n, 3, h, w). Each run's logits are resized to (h, w) and
    turned into probabilities before averaging.
    """
    if images.ndim == 3:
        images = images[None]
    model.set_bn_mode(BNMode.FROZEN)
    n, _, h, w = images.shape
    align = model.spec.nominal_output_stride
    total = None
    runs = 0
    for s in cfg.scales:
        sh, sw = aligned_size(h, s, align), aligned_size(w, s, align)
        x = images if (sh, sw) == (h, w) else bilinear_resize(images, sh, sw)
        variants = [False, True] if cfg.flip else [False]
        for flipped in variants:
            inp = flip_lr(x) if flipped else x
            logits = model.forward(inp, cfg.eval_os)
            probs = softmax(bilinear_resize(logits, h, w), axis=1)
            if flipped:
                probs = flip_lr(probs)
            total = probs if total is None else total + probs
            runs += 1
    return total / runs


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def copy(self) -> "ConfusionMatrix":
        c = ConfusionMatrix(self.num_classes)
        c.counts = self.counts.copy()
        return c

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: ConfusionMatrix, pred_labels: np.ndarray, gt_labels: np.ndarray,
               ignore_label: int = IGNORE_LABEL) -> ConfusionMatrix:
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_label
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    k = conf.num_classes
    if g.size and (g.max() >= k or g.min() < 0 or p.max() >= k or p.min() < 0):
        raise ValueError(f"label out of range for {k} classes")
    conf.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return conf


def mean_iou(conf: ConfusionMatrix, exclude_absent: bool = True):
    """Return (mIOU, per-class IOU). Classes with a zero denominator are NaN.

    With ``exclude_absent`` they are left out of the mean; otherwise they
    count as zero.
    """
    c = conf.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    denom = c.sum(axis=1) + c.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        ious = np.where(denom > 0, tp / denom, np.nan)
    if exclude_absent:
        miou = float(np.nanmean(ious))
    else:
        miou = float(np.nan_to_num(ious, nan=0.0).mean())
    return miou, ious


def evaluate_arrays(model, images: np.ndarray, labels: np.ndarray, cfg: InferenceConfig,
                    num_classes: int, batch_size: int = 8, ignore_label: int = IGNORE_LABEL,
                    return_predictions: bool = False):
    """Run :func:`predict_probs` over an (N, 3, h, w) array and score it."""
    conf = ConfusionMatrix(num_classes)
    preds = []
    for start in range(0, len(images), batch_size):
        x = images[start:start + batch_size]
        probs = predict_probs(model, x, cfg)
        pred = probs.argmax(axis=1).astype(np.uint8)
        accumulate(conf, pred, labels[start:start + batch_size], ignore_label)
        if return_predictions:
            preds.append(pred)
    if return_predictions:
        return conf, np.concatenate(preds) if preds else np.zeros((0,) + labels.shape[1:], np.uint8)
    return conf


def write_report(path, conf: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> None:
    miou, ious = mean_iou(conf)
    names = class_names or [str(i) for i in range(conf.num_classes)]
    lines = ["class,iou"]
    for name, v in zip(names, ious):
        lines.append(f"{name},{'absent' if np.isnan(v) else repr(float(v))}")
    lines.append(f"mIOU,{miou!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
