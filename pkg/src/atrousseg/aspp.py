"""Atrous spatial pyramid pooling head with image-level features."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .conv import ConfigurationError
from .layers import BNModeMixin, Conv, ConvBN
from .norm import BNMode
from .tensor import bilinear_resize, bilinear_resize_backward


@dataclass(frozen=True)
class AsppConfig:
    base_rates: Tuple[int, ...] = (6, 12, 18)
    branch_filters: int = 256
    include_image_pooling: bool = True
    num_classes: int = 6
    # "aligned": pool over the positions of the reference-stride grid, so the
    # image-level feature is identical at every output stride <= reference;
    # "dense": plain mean over every position of the feature map.
    image_pool_grid: str = "aligned"
    pool_reference_os: int = 16

    def __post_init__(self):
        rates = tuple(int(r) for r in self.base_rates)
        if not rates or rates[0] < 1 or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigurationError(f"base_rates must be positive and strictly increasing, got {self.base_rates}")
        if self.image_pool_grid not in ("aligned", "dense"):
            raise ConfigurationError(f"image_pool_grid must be 'aligned' or 'dense', got {self.image_pool_grid!r}")

    @property
    def num_branches(self) -> int:
        return 1 + len(self.base_rates) + int(self.include_image_pooling)

    @property
    def concat_channels(self) -> int:
        return self.branch_filters * self.num_branches


def effective_rates(config: AsppConfig, output_stride: int) -> Tuple[int, ...]:
    """Branch rates at a given output stride: doubled at 8, halved at 32.

    Odd rates cannot be halved exactly; at output stride 32 they round up
    (the field of view is then slightly larger than at 16)."""
    if output_stride == 16:
        return tuple(config.base_rates)
    if output_stride == 8:
        return tuple(2 * r for r in config.base_rates)
    if output_stride == 32:
        return tuple((r + 1) // 2 for r in config.base_rates)
    raise ConfigurationError(f"ASPP supports output stride 8, 16 or 32, got {output_stride}")


class AsppHead(BNModeMixin):
    def __init__(self, config: AsppConfig, in_channels: int, rng: np.random.Generator, bn_decay: float = 0.9997):
        self.config = config
        self.in_channels = in_channels
        f = config.branch_filters
        self.branch1x1 = ConvBN(rng, in_channels, f, 1, bn_decay=bn_decay)
        self.atrous = [ConvBN(rng, in_channels, f, 3, bn_decay=bn_decay) for _ in config.base_rates]
        self.pool = ConvBN(rng, in_channels, f, 1, bn_decay=bn_decay) if config.include_image_pooling else None
        self.fuse = ConvBN(rng, config.concat_channels, f, 1, bn_decay=bn_decay)
        self.classifier = Conv(rng, f, config.num_classes, 1)
        self._cache = None

    def units(self):
        yield "aspp.b0", self.branch1x1
        for i, u in enumerate(self.atrous):
            yield f"aspp.b{i + 1}", u
        if self.pool is not None:
            yield "aspp.pool", self.pool
        yield "aspp.fuse", self.fuse
        yield "aspp.classifier", self.classifier

    def _pool_step(self, output_stride: int) -> int:
        if self.config.image_pool_grid == "dense" or output_stride >= self.config.pool_reference_os:
            return 1
        return self.config.pool_reference_os // output_stride

    def forward(self, features: np.ndarray, output_stride: int) -> np.ndarray:
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise ConfigurationError(f"features {features.shape} do not have {self.in_channels} channels")
        n, _, h, w = features.shape
        if h == 0 or w == 0:
            raise ConfigurationError("zero-sized feature map")
        rates = effective_rates(self.config, output_stride)
        outs = [self.branch1x1.forward(features)]
        outs += [u.forward(features, rate=r) for u, r in zip(self.atrous, rates)]
        step = None
        if self.pool is not None:
            step = self._pool_step(output_stride)
            pooled = features[:, :, ::step, ::step].mean(axis=(2, 3), keepdims=True)
            img = self.pool.forward(pooled)
            outs.append(bilinear_resize(img, h, w))
        cat = np.concatenate(outs, axis=1)
        fused = self.fuse.forward(cat)
        self._cache = (features.shape, step)
        return self.classifier.forward(fused)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        shape, step = self._cache
        n, c, h, w = shape
        g = self.fuse.backward(self.classifier.backward(grad_logits))
        f = self.config.branch_filters
        parts = [g[:, i * f:(i + 1) * f] for i in range(self.config.num_branches)]
        gx = self.branch1x1.backward(parts[0])
        for u, gp in zip(self.atrous, parts[1:]):
            gx = gx + u.backward(gp)
        if self.pool is not None:
            gimg = bilinear_resize_backward(parts[-1], 1, 1)
            gpooled = self.pool.backward(gimg)
            sub = np.zeros(shape)
            view = sub[:, :, ::step, ::step]
            view += gpooled / (view.shape[2] * view.shape[3])
            gx = gx + sub
        self._cache = None
        return gx


def aspp_forward(head: AsppHead, features: np.ndarray, output_stride: int, bn_mode: BNMode) -> np.ndarray:
    head.set_bn_mode(bn_mode)
    return head.forward(features, output_stride)
