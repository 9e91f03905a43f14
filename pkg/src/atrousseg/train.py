"""Training protocol: poly learning rate, scale/crop/flip augmentation,
loss on upsampled logits, two-stage output-stride / batch-norm schedule and
hard-image bootstrapping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import IGNORE_LABEL, Manifest, Sample
from .norm import BNMode
from .tensor import bilinear_resize, bilinear_resize_backward, log_softmax, nearest_resize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    output_stride: int
    bn_mode: BNMode
    base_lr: float
    max_iter: int


@dataclass(frozen=True)
class TrainConfig:
    crop_size: int = 65
    power: float = 0.9
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0
    scale_range: Tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    ignore_label: int = IGNORE_LABEL
    stages: Tuple[Stage, ...] = (
        Stage(16, BNMode.TRAIN, 0.007, 1500),
        Stage(8, BNMode.FROZEN, 0.001, 1500),
    )
    upsample_logits: bool = True
    hard_classes: Tuple[int, ...] = ()
    bootstrap_factor: int = 1
    log_every: int = 50

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            raise ValueError(f"bad scale range {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.bootstrap_factor < 1:
            raise ValueError("bootstrap_factor must be >= 1")
        for st in self.stages:
            if (self.crop_size - 1) % st.output_stride != 0:
                raise ValueError(f"crop size {self.crop_size} is not aligned to output stride "
                                 f"{st.output_stride} (needs N*{st.output_stride}+1)")


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if iteration < 0 or iteration > max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(image: np.ndarray, label: np.ndarray, cfg: TrainConfig, rng: np.random.Generator,
            pad_value: Optional[np.ndarray] = None):
    """Random scale, crop and left-right flip of a (3, h, w) image and its (h, w) label.

    Draw order per sample is fixed: scale, crop row, crop column, flip.
    Regions outside the scaled image are filled with ``pad_value`` (per-channel
    mean) in the image and ``ignore_label`` in the label.
    """
    c, h, w = image.shape
    crop = cfg.crop_size
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image = bilinear_resize(image[None], nh, nw)[0]
        label = nearest_resize(label, nh, nw)
    ph, pw = max(crop, nh), max(crop, nw)
    if (ph, pw) != (nh, nw):
        fill = np.zeros(c) if pad_value is None else np.asarray(pad_value, dtype=np.float64)
        img_p = np.empty((c, ph, pw))
        img_p[:] = fill[:, None, None]
        img_p[:, :nh, :nw] = image
        lbl_p = np.full((ph, pw), cfg.ignore_label, dtype=label.dtype)
        lbl_p[:nh, :nw] = label
        image, label = img_p, lbl_p
    top = int(rng.integers(0, ph - crop + 1))
    left = int(rng.integers(0, pw - crop + 1))
    flip = rng.uniform() < cfg.flip_prob
    image = image[:, top:top + crop, left:left + crop]
    label = label[top:top + crop, left:left + crop]
    if flip:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_label: int):
    n, num_classes, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every pixel carries the ignore label")
    if np.any(labels[valid] >= num_classes):
        raise ValueError(f"label value >= num_classes ({num_classes}) that is not the ignore label")
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax(logits, axis=1)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -float((picked * valid).sum()) / count
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= valid[:, None] / count
    return loss, grad


def upsampled_logits_loss(logits: np.ndarray, groundtruth: np.ndarray, ignore_label: int = IGNORE_LABEL):
    """Softmax cross-entropy at ground-truth resolution.

    Logits are bilinearly resized to the label size; the returned gradient is
    with respect to the original (low resolution) logits.
    """
    if groundtruth.ndim == 2:
        groundtruth = groundtruth[None]
    h, w = logits.shape[2], logits.shape[3]
    H, W = groundtruth.shape[1], groundtruth.shape[2]
    up = bilinear_resize(logits, H, W)
    loss, grad_up = _cross_entropy(up, groundtruth, ignore_label)
    return loss, bilinear_resize_backward(grad_up, h, w)


def downsampled_gt_loss(logits: np.ndarray, groundtruth: np.ndarray, ignore_label: int = IGNORE_LABEL):
    """The older protocol: nearest-downsample labels to logit resolution."""
    if groundtruth.ndim == 2:
        groundtruth = groundtruth[None]
    small = nearest_resize(groundtruth, logits.shape[2], logits.shape[3])
    return _cross_entropy(logits, small, ignore_label)


# ---------------------------------------------------------------------------
# bootstrapping
# ---------------------------------------------------------------------------

def bootstrap_manifest(manifest: Manifest, hard_classes: Sequence[int], factor: int,
                       rng: Optional[np.random.Generator] = None) -> Manifest:
    """Repeat every entry containing a hard class ``factor`` times.

    With an ``rng`` the result is shuffled; without one, copies stay adjacent
    to their original position.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    hard = set(int(c) for c in hard_classes)
    entries = []
    for e in manifest.entries:
        reps = factor if hard & set(e.classes) else 1
        entries.extend([e] * reps)
    if rng is not None:
        order = rng.permutation(len(entries))
        entries = [entries[i] for i in order]
    return Manifest(entries, manifest.split)


def bootstrap_indices(classes: Sequence[frozenset], hard_classes: Sequence[int], factor: int) -> np.ndarray:
    hard = set(int(c) for c in hard_classes)
    idx = []
    for i, cl in enumerate(classes):
        idx.extend([i] * (factor if hard & set(cl) else 1))
    return np.array(idx, dtype=np.int64)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD: v <- m*v + g + wd*w ; w <- w - lr*v (in place)."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float,
             skip: frozenset = frozenset()) -> None:
        for name, p in params.items():
            if name in skip:
                continue
            g = grads[name]
            if self.weight_decay and name.endswith(".w"):
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class ArrayDataset:
    """Samples held in memory as uint8 images and labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = images  # (N, 3, h, w) uint8
        self.labels = labels  # (N, h, w) uint8
        self.classes = [frozenset(int(v) for v in np.unique(l) if v != IGNORE_LABEL) for l in labels]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "ArrayDataset":
        imgs = np.stack([np.rint(s.image * 255).astype(np.uint8) for s in samples])
        lbls = np.stack([s.label for s in samples])
        return cls(imgs, lbls)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "ArrayDataset":
        return cls.from_samples([manifest.load(i) for i in range(len(manifest))])

    def __len__(self):
        return len(self.labels)

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0

    def channel_mean(self) -> np.ndarray:
        return self.images.reshape(len(self), 3, -1).mean(axis=(0, 2)) / 255.0


@dataclass
class TrainResult:
    log: List[dict]
    iterations: int
    optimizer: SGD


def run_training(model, dataset: ArrayDataset, cfg: TrainConfig, seed: int,
                 evaluate: Optional[Callable[[object, int], float]] = None,
                 on_log: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``model`` in place through every stage of ``cfg``.

    ``evaluate(model, output_stride)`` (optional) is called at the end of
    each stage and its value is logged as ``val_miou``.
    """
    rng = np.random.default_rng(seed)
    pad_value = dataset.channel_mean()
    order_base = bootstrap_indices(dataset.classes, cfg.hard_classes, cfg.bootstrap_factor)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    records: List[dict] = []
    total = 0
    queue = np.empty(0, dtype=np.int64)
    loss_fn = upsampled_logits_loss if cfg.upsample_logits else downsampled_gt_loss

    for stage_idx, stage in enumerate(cfg.stages):
        model.set_bn_mode(stage.bn_mode)
        skip = frozenset(model.frozen_parameter_names())
        for it in range(stage.max_iter):
            lr = poly_lr(it, stage.max_iter, stage.base_lr, cfg.power)
            if len(queue) < cfg.batch_size:
                queue = np.concatenate([queue, rng.permutation(order_base)])
            batch, queue = queue[:cfg.batch_size], queue[cfg.batch_size:]
            imgs, lbls = [], []
            for i in batch:
                im, lb = augment(dataset.image(int(i)), dataset.labels[int(i)], cfg, rng, pad_value)
                imgs.append(im)
                lbls.append(lb)
            x = np.stack(imgs)
            y = np.stack(lbls)
            logits = model.forward(x, stage.output_stride)
            loss, grad = loss_fn(logits, y, cfg.ignore_label)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at stage {stage_idx + 1} iteration {it} "
                                    f"(lr={lr:.3g}, logits range [{logits.min():.3g}, {logits.max():.3g}])")
            model.zero_grad()
            model.backward(grad)
            opt.step(model.parameters(), model.grads(), lr, skip)
            total += 1
            if cfg.log_every and (it % cfg.log_every == 0 or it == stage.max_iter - 1):
                rec = {"iter": total, "lr": lr, "loss": loss}
                records.append(rec)
                if on_log:
                    on_log(rec)
                log.debug("stage %d iter %d lr %.5f loss %.4f", stage_idx + 1, it, lr, loss)
        if evaluate is not None and stage.max_iter > 0:
            miou = evaluate(model, stage.output_stride)
            # end of stage: the poly schedule has reached zero
            rec = {"iter": total, "lr": 0.0, "loss": loss, "val_miou": miou}
            records.append(rec)
            if on_log:
                on_log(rec)
    model.set_bn_mode(BNMode.FROZEN)
    return TrainResult(records, total, opt)


def default_stages(stage1_iters: int = 1500, stage2_iters: int = 1500, train_os: int = 16,
                   finetune_os: int = 8, bn_finetune: bool = True,
                   lr1: float = 0.007, lr2: float = 0.001) -> Tuple[Stage, ...]:
    first_mode = BNMode.TRAIN if bn_finetune else BNMode.FROZEN
    return (Stage(train_os, first_mode, lr1, stage1_iters),
            Stage(finetune_os, BNMode.FROZEN, lr2, stage2_iters))
