"""Stateful building blocks with hand-written backward passes.

Each unit keeps the cache of its most recent forward call, so a forward must
be followed by at most one backward before the next forward.
"""
from __future__ import annotations

import dataclasses
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .conv import ConvLayer, atrous_conv_backward, atrous_conv_forward, he_init
from .norm import BatchNorm, BNMode, bn_backward, bn_forward
from .tensor import DTYPE, relu_backward


class ConvBN:
    """Convolution -> batch norm -> optional ReLU.

    The convolution bias stays at zero and is not a parameter: the BN shift
    makes it redundant.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, relu: bool = True,
                 bn_decay: float = 0.9997):
        self.conv = he_init(rng, c_out, c_in, k)
        self.bn = BatchNorm.create(c_out, decay=bn_decay)
        self.relu = relu
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, rate: int = 1, stride: int = 1) -> np.ndarray:
        layer = dataclasses.replace(self.conv, rate=rate, stride=stride, padding="same")
        z, conv_cache = atrous_conv_forward(x, layer, return_cache=True)
        y, bn_cache = bn_forward(z, self.bn, return_cache=True)
        if self.relu:
            y = np.maximum(y, 0.0)
        self._cache = (layer, conv_cache, bn_cache, y)
        return y

    def backward(self, grad: np.ndarray, need_grad_x: bool = True) -> Optional[np.ndarray]:
        layer, conv_cache, bn_cache, y = self._cache
        if self.relu:
            grad = relu_backward(y, grad)
        gz, gg, gb = bn_backward(self.bn, grad, bn_cache)
        gx, gw, _ = atrous_conv_backward(None, layer, gz, cache=conv_cache, need_grad_x=need_grad_x)
        _accumulate(self.grads, "conv.w", gw)
        _accumulate(self.grads, "bn.gamma", gg)
        _accumulate(self.grads, "bn.beta", gb)
        self._cache = None
        return gx

    def params(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "conv.w", self.conv.weights
        yield "bn.gamma", self.bn.gamma
        yield "bn.beta", self.bn.beta

    def buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "bn.running_mean", self.bn.running_mean
        yield "bn.running_var", self.bn.running_var

    def batchnorms(self):
        yield self.bn


class Conv:
    """Bare convolution with bias (the classifier)."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 1):
        self.conv = he_init(rng, c_out, c_in, k)
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cache = atrous_conv_forward(x, self.conv, return_cache=True)
        self._cache = cache
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        gx, gw, gb = atrous_conv_backward(None, self.conv, grad, cache=self._cache)
        _accumulate(self.grads, "conv.w", gw)
        _accumulate(self.grads, "conv.b", gb)
        self._cache = None
        return gx

    def params(self):
        yield "conv.w", self.conv.weights
        yield "conv.b", self.conv.bias

    def buffers(self):
        return iter(())

    def batchnorms(self):
        return iter(())


def _accumulate(store: Dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def max_pool_forward(x: np.ndarray, k: int = 3, stride: int = 2):
    """Same-padded k x k max pool; the stride decimates the dense response.

    Returns ``(y, argmax)`` where ``argmax`` indexes the winning tap per dense
    output position (first maximum in row-major tap order).
    """
    n, c, h, w = x.shape
    p = k // 2
    xp = np.full((n, c, h + 2 * p, w + 2 * p), -np.inf, dtype=DTYPE)
    xp[:, :, p:p + h, p:p + w] = x
    taps = np.stack([xp[:, :, i:i + h, j:j + w] for i in range(k) for j in range(k)])
    arg = taps.argmax(axis=0)
    dense = np.take_along_axis(taps, arg[None], axis=0)[0]
    return np.ascontiguousarray(dense[:, :, ::stride, ::stride]), arg


def max_pool_backward(grad: np.ndarray, arg: np.ndarray, k: int = 3, stride: int = 2) -> np.ndarray:
    n, c, h, w = arg.shape
    p = k // 2
    dense = np.zeros((n, c, h, w), dtype=DTYPE)
    dense[:, :, ::stride, ::stride] = grad
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
    for t in range(k * k):
        i, j = divmod(t, k)
        gxp[:, :, i:i + h, j:j + w] += np.where(arg == t, dense, 0.0)
    return gxp[:, :, p:p + h, p:p + w].copy()


class BNModeMixin:
    """Helpers shared by modules that own ConvBN units."""

    def units(self):
        raise NotImplementedError

    def set_bn_mode(self, mode: BNMode) -> None:
        for _, unit in self.units():
            for bn in unit.batchnorms():
                bn.mode = BNMode(mode)

    def zero_grad(self) -> None:
        for _, unit in self.units():
            unit.grads = {}
