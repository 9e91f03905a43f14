"""Batch normalization with a train / frozen lifecycle."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import DTYPE

DEFAULT_DECAY = 0.9997
DEFAULT_EPS = 1e-5


class BNMode(str, Enum):
    TRAIN = "train"
    FROZEN = "frozen"


class BatchNormError(ValueError):
    pass


@dataclass
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: BNMode


@dataclass
class BatchNorm:
    """Per-channel affine normalization.

    In ``TRAIN`` mode the forward pass normalizes with the batch moments over
    (n, h, w), then moves the running moments toward them by ``1 - decay``.
    ``FROZEN`` mode normalizes with the running moments and never mutates.
    Variance is the biased (population) estimate.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    decay: float = DEFAULT_DECAY
    eps: float = DEFAULT_EPS
    mode: BNMode = BNMode.TRAIN

    @classmethod
    def create(cls, channels: int, decay: float = DEFAULT_DECAY, eps: float = DEFAULT_EPS) -> "BatchNorm":
        return cls(np.ones(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE),
                   np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), decay, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def frozen(self) -> bool:
        return self.mode is BNMode.FROZEN

    def freeze(self) -> "BatchNorm":
        self.mode = BNMode.FROZEN
        return self

    def unfreeze(self) -> "BatchNorm":
        self.mode = BNMode.TRAIN
        return self


def freeze(bn: BatchNorm) -> BatchNorm:
    return bn.freeze()


def unfreeze(bn: BatchNorm) -> BatchNorm:
    return bn.unfreeze()


def bn_forward(x: np.ndarray, bn: BatchNorm, return_cache: bool = False):
    if x.ndim != 4 or x.shape[1] != bn.channels:
        raise BatchNormError(f"input {x.shape} does not match {bn.channels} channels")
    g = bn.gamma[None, :, None, None]
    b = bn.beta[None, :, None, None]
    if bn.mode is BNMode.FROZEN:
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        x_hat = (x - bn.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise BatchNormError("train-mode batch norm needs at least 2 values per channel (n*h*w >= 2)")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + bn.eps)
        x_hat = xc * inv_std[None, :, None, None]
        # outputs use the current batch; running stats are updated afterwards
        bn.running_mean = bn.decay * bn.running_mean + (1.0 - bn.decay) * mean
        bn.running_var = bn.decay * bn.running_var + (1.0 - bn.decay) * var
    y = g * x_hat + b
    if return_cache:
        return y, BNCache(x_hat, inv_std, bn.mode)
    return y


def bn_backward(bn: BatchNorm, grad_out: np.ndarray, cache: BNCache):
    """Returns (grad_x, grad_gamma, grad_beta) for the mode used in the forward pass."""
    if grad_out.shape != cache.x_hat.shape:
        raise BatchNormError(f"grad_out shape {grad_out.shape} != {cache.x_hat.shape}")
    x_hat = cache.x_hat
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    scale = (bn.gamma * cache.inv_std)[None, :, None, None]
    if cache.mode is BNMode.FROZEN:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    gx = scale * (grad_out
                  - grad_beta[None, :, None, None] / m
                  - x_hat * grad_gamma[None, :, None, None] / m)
    return gx, grad_gamma, grad_beta
