"""Miniature residual backbone with output-stride control and multi-grid rates.

A :class:`NetworkSpec` describes the nominal network (every stride applied).
:func:`convert_to_output_stride` walks it and, once the cumulative stride
reaches the requested output stride, turns every later stride into 1 while a
rate multiplier doubles at each removed stride-2 layer. The rate of a conv is
``multiplier * unit_rate`` where the unit rates come from the block's
multi-grid triple.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .conv import ConfigurationError
from .layers import BNModeMixin, ConvBN, max_pool_backward, max_pool_forward
from .norm import BNMode

DEFAULT_CHANNELS = (32, 64, 128, 256)


@dataclass(frozen=True)
class BlockSpec:
    name: str
    channels: int
    nominal_stride: int = 1  # applied on the last conv of the block
    unit_rates: Tuple[int, int, int] = (1, 1, 1)
    num_convs: int = 3

    def __post_init__(self):
        if len(self.unit_rates) != self.num_convs or any(int(r) < 1 for r in self.unit_rates):
            raise ConfigurationError(f"{self.name}: unit_rates must be {self.num_convs} positive ints, got {self.unit_rates}")
        if self.nominal_stride not in (1, 2):
            raise ConfigurationError(f"{self.name}: nominal stride must be 1 or 2")


@dataclass(frozen=True)
class StemSpec:
    channels: int = 16
    conv_stride: int = 2
    pool_stride: int = 2

    @property
    def stride(self) -> int:
        return self.conv_stride * self.pool_stride


@dataclass(frozen=True)
class NetworkSpec:
    blocks: Tuple[BlockSpec, ...]
    stem: StemSpec = StemSpec()
    in_channels: int = 3

    @property
    def nominal_output_stride(self) -> int:
        os_ = self.stem.stride
        for b in self.blocks:
            os_ *= b.nominal_stride
        return os_

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


def make_network_spec(channels: Sequence[int] = DEFAULT_CHANNELS, multi_grid: Sequence[int] = (1, 2, 4),
                      extra_blocks: int = 0, stem_channels: int = 16) -> NetworkSpec:
    """block1..block4 with strides (2, 2, 2, 1), plus optional replicas of block4.

    Every block but the last carries stride 2 on its last conv, so with
    three extra blocks the nominal output stride is 256. The multi-grid
    triple applies to block4 and every replica.
    """
    if len(channels) != 4:
        raise ConfigurationError("channels must list block1..block4")
    names = [f"block{i + 1}" for i in range(4 + extra_blocks)]
    blocks = []
    for i, name in enumerate(names):
        last = i == len(names) - 1
        ch = channels[min(i, 3)]
        unit = tuple(int(r) for r in multi_grid) if i >= 3 else (1, 1, 1)
        blocks.append(BlockSpec(name, ch, 1 if last else 2, unit))
    return NetworkSpec(tuple(blocks), StemSpec(stem_channels))


@dataclass(frozen=True)
class ConvPlan:
    name: str
    stride: int
    rate: int


@dataclass(frozen=True)
class CompiledNetwork:
    spec: NetworkSpec
    output_stride: int
    convs: Tuple[ConvPlan, ...]
    multipliers: Tuple[Tuple[str, int], ...]  # rate multiplier at the first conv of each block

    def plan(self, name: str) -> ConvPlan:
        for c in self.convs:
            if c.name == name:
                return c
        raise KeyError(name)

    def block_rates(self, block: str) -> Tuple[int, ...]:
        return tuple(c.rate for c in self.convs if c.name.startswith(block + ".conv"))

    def multiplier(self, block: str) -> int:
        return dict(self.multipliers)[block]


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


def convert_to_output_stride(spec: NetworkSpec, target_os: int) -> CompiledNetwork:
    if not _is_power_of_two(target_os):
        raise ConfigurationError(f"output stride must be a power of two, got {target_os}")
    nominal = spec.nominal_output_stride
    if target_os > nominal:
        raise ConfigurationError(f"output stride {target_os} exceeds the nominal {nominal}")
    if target_os < spec.stem.stride:
        raise ConfigurationError(f"output stride {target_os} is below the stem stride {spec.stem.stride}")

    convs = [ConvPlan("stem.conv", spec.stem.conv_stride, 1)]
    cumulative = spec.stem.stride
    multiplier = 1
    multipliers = []
    for block in spec.blocks:
        multipliers.append((block.name, multiplier))
        block_stride = 1
        for idx in range(block.num_convs):
            nominal_stride = block.nominal_stride if idx == block.num_convs - 1 else 1
            rate = multiplier * block.unit_rates[idx]
            stride = nominal_stride
            if stride > 1 and cumulative >= target_os:
                # decimation removed: later layers see a denser grid
                multiplier *= stride
                stride = 1
            cumulative *= stride
            block_stride *= stride
            convs.append(ConvPlan(f"{block.name}.conv{idx + 1}", stride, rate))
        convs.append(ConvPlan(f"{block.name}.proj", block_stride, 1))
    if cumulative != target_os:
        raise ConfigurationError(f"cannot reach output stride {target_os} (got {cumulative})")
    return CompiledNetwork(spec, target_os, tuple(convs), tuple(multipliers))


def cascade_rates(compiled: CompiledNetwork, num_extra_blocks: Optional[int] = None) -> Dict[str, int]:
    """Base rate multipliers of block4 and its replicas (block5, block6, ...)."""
    names = [b.name for b in compiled.spec.blocks[3:]]
    if num_extra_blocks is not None:
        names = names[:1 + num_extra_blocks]
    return {n: compiled.multiplier(n) for n in names}


def output_size(h: int, output_stride: int) -> int:
    return (h - 1) // output_stride + 1


def check_alignment(h: int, w: int, nominal_os: int) -> None:
    for v in (h, w):
        if v < 1 or (v - 1) % nominal_os != 0:
            raise ConfigurationError(
                f"input size {h}x{w} is not aligned: each side must be N*{nominal_os}+1 "
                f"(e.g. {nominal_os + 1}, {2 * nominal_os + 1}, {4 * nominal_os + 1})")


class ResidualBlock:
    """Three 3x3 conv-BN units plus a shortcut, ReLU after the sum."""

    def __init__(self, rng, spec: BlockSpec, c_in: int, bn_decay: float):
        self.spec = spec
        chans = [c_in] + [spec.channels] * spec.num_convs
        self.convs = [ConvBN(rng, chans[i], chans[i + 1], 3, relu=i < spec.num_convs - 1, bn_decay=bn_decay)
                      for i in range(spec.num_convs)]
        # projection decided by the nominal geometry so weights never depend on the output stride
        self.proj = (ConvBN(rng, c_in, spec.channels, 1, relu=False, bn_decay=bn_decay)
                     if c_in != spec.channels or spec.nominal_stride != 1 else None)
        self._out = None

    def units(self):
        for i, u in enumerate(self.convs):
            yield f"conv{i + 1}", u
        if self.proj is not None:
            yield "proj", self.proj

    def forward(self, x, compiled: CompiledNetwork):
        name = self.spec.name
        h = x
        for i, u in enumerate(self.convs):
            p = compiled.plan(f"{name}.conv{i + 1}")
            h = u.forward(h, rate=p.rate, stride=p.stride)
        if self.proj is not None:
            short = self.proj.forward(x, stride=compiled.plan(f"{name}.proj").stride)
        else:
            short = x
        out = np.maximum(h + short, 0.0)
        self._out = out
        return out

    def backward(self, grad, need_grad_x: bool = True):
        grad = grad * (self._out > 0)
        g = grad
        for i, u in reversed(list(enumerate(self.convs))):
            g = u.backward(g, need_grad_x=need_grad_x or i > 0)
        if self.proj is not None:
            gs = self.proj.backward(grad, need_grad_x=need_grad_x)
        else:
            gs = grad
        self._out = None
        if not need_grad_x:
            return None
        return g + gs


class Backbone(BNModeMixin):
    """Stem (3x3 conv stride 2 + 3x3 max pool stride 2) followed by residual blocks."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, bn_decay: float = 0.9997):
        self.spec = spec
        self.stem = ConvBN(rng, spec.in_channels, spec.stem.channels, 3, relu=True, bn_decay=bn_decay)
        self.blocks = []
        c = spec.stem.channels
        for b in spec.blocks:
            self.blocks.append(ResidualBlock(rng, b, c, bn_decay))
            c = b.channels
        self.out_channels = c
        self._pool_arg = None

    def units(self):
        yield "stem.conv", self.stem
        for blk in self.blocks:
            for name, u in blk.units():
                yield f"{blk.spec.name}.{name}", u

    def forward(self, x: np.ndarray, compiled: CompiledNetwork, check: bool = True) -> np.ndarray:
        if compiled.spec != self.spec:
            raise ConfigurationError("compiled network was built from a different spec")
        if check:
            check_alignment(x.shape[2], x.shape[3], self.spec.nominal_output_stride)
        h = self.stem.forward(x, stride=compiled.plan("stem.conv").stride)
        h, self._pool_arg = max_pool_forward(h, 3, self.spec.stem.pool_stride)
        for blk in self.blocks:
            h = blk.forward(h, compiled)
        return h

    def backward(self, grad: np.ndarray, need_grad_x: bool = False) -> Optional[np.ndarray]:
        for blk in reversed(self.blocks):
            grad = blk.backward(grad)
        grad = max_pool_backward(grad, self._pool_arg, 3, self.spec.stem.pool_stride)
        self._pool_arg = None
        return self.stem.backward(grad, need_grad_x=need_grad_x)


def backbone_forward(net: Backbone, compiled: CompiledNetwork, x: np.ndarray, bn_mode: BNMode) -> np.ndarray:
    net.set_bn_mode(bn_mode)
    return net.forward(x, compiled)
