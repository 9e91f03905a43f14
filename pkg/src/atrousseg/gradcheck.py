"""Central finite-difference checks of every hand-written backward pass."""
from __future__ import annotations

import dataclasses
from typing import Callable, Dict

import numpy as np

from .aspp import AsppConfig, AsppHead
from .conv import ConvLayer, atrous_conv_backward, atrous_conv_forward
from .norm import BatchNorm, bn_backward, bn_forward
from .train import upsampled_logits_loss

TOLERANCE = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ||a - n|| / max(||a||, ||n||)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_conv(rng: np.random.Generator, rate: int = 2, stride: int = 2) -> Dict[str, float]:
    layer = ConvLayer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), rate=rate, stride=stride)
    x = rng.normal(size=(2, 2, 7, 6))
    go = rng.normal(size=atrous_conv_forward(x, layer).shape)
    f = lambda: float((atrous_conv_forward(x, layer) * go).sum())
    gx, gw, gb = atrous_conv_backward(x, layer, go)
    return {"x": rel_error(gx, numeric_grad(f, x)),
            "w": rel_error(gw, numeric_grad(f, layer.weights)),
            "b": rel_error(gb, numeric_grad(f, layer.bias))}


def check_batchnorm(rng: np.random.Generator) -> Dict[str, float]:
    bn = BatchNorm.create(3)
    bn.gamma[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta[:] = rng.normal(size=3)
    x = rng.normal(size=(2, 3, 4, 4)) * 2 + 0.5
    go = rng.normal(size=x.shape)
    f = lambda: float((bn_forward(x, bn) * go).sum())
    _, cache = bn_forward(x, bn, return_cache=True)
    gx, gg, gb = bn_backward(bn, go, cache)
    return {"x": rel_error(gx, numeric_grad(f, x)),
            "gamma": rel_error(gg, numeric_grad(f, bn.gamma)),
            "beta": rel_error(gb, numeric_grad(f, bn.beta))}


def check_aspp(rng: np.random.Generator, feature_size: int = 9, in_channels: int = 3, filters: int = 3,
               num_classes: int = 2, output_stride: int = 16, bn_mode: str = "train",
               batch: int = 4) -> Dict[str, float]:
    cfg = AsppConfig(base_rates=(2, 4, 6), branch_filters=filters, num_classes=num_classes)
    head = AsppHead(cfg, in_channels, rng)
    for _, unit in head.units():
        for bn in unit.batchnorms():
            bn.gamma[:] = rng.uniform(0.5, 1.5, bn.channels)
            bn.beta[:] = rng.normal(0, 0.5, bn.channels)
            bn.running_var[:] = rng.uniform(0.5, 2.0, bn.channels)
    head.set_bn_mode(bn_mode)
    # the pooled branch normalizes `batch` values per channel; keep it > 2 so
    # the finite differences stay well conditioned
    x = rng.normal(size=(batch, in_channels, feature_size, feature_size))
    go = rng.normal(size=(batch, num_classes, feature_size, feature_size))
    f = lambda: float((head.forward(x, output_stride) * go).sum())
    head.zero_grad()
    head.forward(x, output_stride)
    gx = head.backward(go)
    out = {"x": rel_error(gx, numeric_grad(f, x))}
    worst = 0.0
    for name, unit in head.units():
        for pname, arr in unit.params():
            worst = max(worst, rel_error(unit.grads[pname], numeric_grad(f, arr)))
    out["params"] = worst
    return out


def check_loss(rng: np.random.Generator, num_classes: int = 3, size: int = 5, gt_size: int = 9) -> Dict[str, float]:
    logits = rng.normal(size=(2, num_classes, size, size))
    gt = rng.integers(0, num_classes, size=(2, gt_size, gt_size))
    gt[0, 0, :3] = 255
    f = lambda: upsampled_logits_loss(logits, gt)[0]
    _, g = upsampled_logits_loss(logits, gt)
    return {"logits": rel_error(g, numeric_grad(f, logits))}


def run_all(seed: int = 0) -> Dict[str, float]:
    """Max relative error per component."""
    rng = np.random.default_rng(seed)
    suites = {
        "conv": lambda: {**check_conv(rng, 2, 2), **{k + "_s1": v for k, v in check_conv(rng, 3, 1).items()}},
        "batchnorm": lambda: check_batchnorm(rng),
        "aspp": lambda: {**check_aspp(rng), **{k + "_os8": v for k, v in check_aspp(rng, output_stride=8).items()}},
        "loss": lambda: check_loss(rng),
    }
    return {name: max(fn().values()) for name, fn in suites.items()}
