"""Atrous (dilated) 2-D convolution: forward, backward and valid-tap analysis.

For a rate ``r`` and stride ``s`` the forward pass computes::

    y[n, o, i, j] = b[o] + sum_{c, ki, kj} x[n, c, s*i + r*ki - pt, s*j + r*kj - pl] * w[o, c, ki, kj]

with taps outside the input reading zero. Under "same" padding
``pt = pl = r*(k-1)//2`` and the output is ``ceil(h/s) x ceil(w/s)``.

The fast path gathers the (rate, stride)-sampled taps into a column matrix and
does one GEMM. Taps that land entirely in the padding for every output
position are dropped before the GEMM; they only ever multiply zeros.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .tensor import DTYPE, zero_pad

Padding = Union[str, Tuple[int, int, int, int]]


class ConfigurationError(ValueError):
    """Raised when layer geometry and input do not fit together."""


@dataclass
class ConvLayer:
    weights: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    rate: int = 1
    stride: int = 1
    padding: Padding = "same"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigurationError(f"weights must be (c_out, c_in, k, k), got {self.weights.shape}")
        if self.k % 2 != 1:
            raise ConfigurationError(f"kernel size must be odd, got {self.k}")
        if self.bias.shape != (self.c_out,):
            raise ConfigurationError(f"bias must have shape ({self.c_out},), got {self.bias.shape}")
        if self.rate < 1 or self.stride < 1:
            raise ConfigurationError(f"rate and stride must be >= 1, got r={self.rate} s={self.stride}")

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    def resolved_padding(self) -> Tuple[int, int, int, int]:
        if self.padding == "same":
            p = self.rate * (self.k - 1) // 2
            return (p, p, p, p)
        pad = tuple(int(p) for p in self.padding)
        if len(pad) != 4 or min(pad) < 0:
            raise ConfigurationError(f"explicit padding must be 4 non-negative ints, got {self.padding}")
        return pad

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        pt, pb, pl, pr = self.resolved_padding()
        span = self.rate * (self.k - 1) + 1
        ho = (h + pt + pb - span) // self.stride + 1
        wo = (w + pl + pr - span) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"input {h}x{w} too small for kernel span {span} with padding {(pt, pb, pl, pr)}")
        return ho, wo


def _check_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != layer.c_in:
        raise ConfigurationError(f"channel mismatch: input has {x.shape[1]}, layer expects {layer.c_in}")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ConfigurationError(f"zero-sized spatial input {x.shape}")


def _live_taps(n_in: int, k: int, rate: int, pad_before: int, pad_after: int) -> np.ndarray:
    """Kernel offsets along one axis whose stride-1 sweep touches the real input.

    The set does not depend on the stride, so a strided layer and its
    stride-1 counterpart reduce over identical taps.
    """
    reach = n_in + pad_before + pad_after - (rate * (k - 1) + 1)
    live = [t for t in range(k) if t * rate - pad_before < n_in and t * rate - pad_before + reach >= 0]
    return np.array(live, dtype=np.int64)


@dataclass
class ConvCache:
    x_shape: Tuple[int, int, int, int]
    cols: np.ndarray  # (c_in * live taps, n * h1 * w1) at stride 1
    taps_h: np.ndarray
    taps_w: np.ndarray
    dense_hw: Tuple[int, int]
    pad: Tuple[int, int, int, int]
    stride: int
    pointwise: bool = False


def _gather(x, rate, taps_h, taps_w, ho, wo, pad):
    """Column matrix of rate-sampled taps at stride 1, rows ordered (c, ki, kj)."""
    n, c = x.shape[0], x.shape[1]
    xp = zero_pad(x, pad) if any(pad) else x
    cols = np.empty((c, len(taps_h), len(taps_w), n, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for a, ki in enumerate(taps_h):
        r0 = ki * rate
        for b, kj in enumerate(taps_w):
            c0 = kj * rate
            cols[:, a, b] = xt[:, :, r0:r0 + ho, c0:c0 + wo]
    return cols.reshape(c * len(taps_h) * len(taps_w), n * ho * wo)


def _live_weights(layer: ConvLayer, taps_h, taps_w) -> np.ndarray:
    return layer.weights[:, :, taps_h][:, :, :, taps_w].reshape(layer.c_out, -1)


def atrous_conv_forward(x: np.ndarray, layer: ConvLayer, return_cache: bool = False):
    """Atrous convolution of an NCHW tensor; optionally returns the backward cache.

    The stride is applied to the output grid after rate sampling: a strided
    layer is evaluated as its stride-1 response decimated by ``stride``.
    """
    _check_input(x, layer)
    n, _, h, w = x.shape
    layer.output_size(h, w)
    pad = layer.resolved_padding()
    k, r = layer.k, layer.rate
    span = r * (k - 1) + 1
    h1 = h + pad[0] + pad[1] - span + 1
    w1 = w + pad[2] + pad[3] - span + 1

    pointwise = k == 1 and not any(pad)
    if pointwise:
        cols = x.transpose(1, 0, 2, 3).reshape(layer.c_in, n * h * w)
        taps_h = taps_w = np.zeros(1, dtype=np.int64)
    else:
        taps_h = _live_taps(h, k, r, pad[0], pad[1])
        taps_w = _live_taps(w, k, r, pad[2], pad[3])
        cols = _gather(x, r, taps_h, taps_w, h1, w1, pad)

    y = (_live_weights(layer, taps_h, taps_w) @ cols).reshape(layer.c_out, n, h1, w1).transpose(1, 0, 2, 3)
    s = layer.stride
    if s > 1:
        y = y[:, :, ::s, ::s]
    y = np.ascontiguousarray(y + layer.bias[None, :, None, None])
    if not return_cache:
        return y
    return y, ConvCache(x.shape, cols, taps_h, taps_w, (h1, w1), pad, s, pointwise)


def atrous_conv_backward(x: Optional[np.ndarray], layer: ConvLayer, grad_out: np.ndarray,
                         cache: Optional[ConvCache] = None, need_grad_x: bool = True):
    """Gradients of ``sum(grad_out * forward(x))`` w.r.t. input, weights and bias.

    Either ``x`` or a ``cache`` from the forward pass must be supplied.
    Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None when not requested.
    The input gradient is the transposed (full) atrous correlation of ``grad_out``.
    """
    if cache is None:
        _, cache = atrous_conv_forward(x, layer, return_cache=True)
    n, c, h, w = cache.x_shape
    h1, w1 = cache.dense_hw
    s = cache.stride
    ho, wo = (h1 - 1) // s + 1, (w1 - 1) // s + 1
    if grad_out.shape != (n, layer.c_out, ho, wo):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} != forward output {(n, layer.c_out, ho, wo)}")

    if s > 1:
        dense = np.zeros((n, layer.c_out, h1, w1), dtype=DTYPE)
        dense[:, :, ::s, ::s] = grad_out
        grad_out = dense
    g = grad_out.transpose(1, 0, 2, 3).reshape(layer.c_out, n * h1 * w1)
    grad_b = g.sum(axis=1)
    th, tw = cache.taps_h, cache.taps_w
    gw_live = (g @ cache.cols.T).reshape(layer.c_out, c, len(th), len(tw))
    if len(th) == layer.k and len(tw) == layer.k:
        grad_w = gw_live
    else:
        grad_w = np.zeros_like(layer.weights)
        grad_w[:, :, th[:, None], tw[None, :]] = gw_live

    if not need_grad_x:
        return None, grad_w, grad_b

    gcols = _live_weights(layer, th, tw).T @ g
    if cache.pointwise:
        gx = gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), grad_w, grad_b

    gcols = gcols.reshape(c, len(th), len(tw), n, h1, w1)
    pt, pb, pl, pr = cache.pad
    r = layer.rate
    gxp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=DTYPE)
    for a, ki in enumerate(th):
        r0 = ki * r
        for b, kj in enumerate(tw):
            c0 = kj * r
            gxp[:, :, r0:r0 + h1, c0:c0 + w1] += gcols[:, a, b]
    gx = gxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), grad_w, grad_b


# ---------------------------------------------------------------------------
# Reference paths (independent of the gather/GEMM route above)
# ---------------------------------------------------------------------------

def conv2d_naive(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Seven nested loops, taps outside the input skipped. Only for small tests."""
    _check_input(x, layer)
    n, c, h, w = x.shape
    ho, wo = layer.output_size(h, w)
    pt, _, pl, _ = layer.resolved_padding()
    k, r, s = layer.k, layer.rate, layer.stride
    wts = layer.weights
    y = np.zeros((n, layer.c_out, ho, wo), dtype=DTYPE)
    for b in range(n):
        for o in range(layer.c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for ki in range(k):
                            row = s * i + r * ki - pt
                            if row < 0 or row >= h:
                                continue
                            for kj in range(k):
                                col = s * j + r * kj - pl
                                if 0 <= col < w:
                                    acc += x[b, ch, row, col] * wts[o, ch, ki, kj]
                    y[b, o, i, j] = acc + layer.bias[o]
    return y


def conv2d_shift_add(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int, pad) -> np.ndarray:
    """Plain (rate-1) convolution by shift-and-accumulate over kernel taps."""
    n, c, h, w = x.shape
    co, _, kh, kw = weights.shape
    pt, pb, pl, pr = pad
    xp = zero_pad(x, pad)
    ho = (h + pt + pb - kh) // stride + 1
    wo = (w + pl + pr - kw) // stride + 1
    y = np.zeros((n, co, ho, wo), dtype=DTYPE)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]
            y += np.einsum("nchw,oc->nohw", patch, weights[:, :, ki, kj])
    return y + bias[None, :, None, None]


def dilate_kernel(weights: np.ndarray, rate: int) -> np.ndarray:
    """Insert ``rate - 1`` zeros between consecutive taps of a (o, c, k, k) kernel."""
    co, ci, k, _ = weights.shape
    span = rate * (k - 1) + 1
    out = np.zeros((co, ci, span, span), dtype=DTYPE)
    out[:, :, ::rate, ::rate] = weights
    return out


# ---------------------------------------------------------------------------
# Field-of-view analysis
# ---------------------------------------------------------------------------

def _axis_counts(n: int, k: int, rate: int) -> np.ndarray:
    """Number of in-range taps along one axis for each output index (stride 1, same padding)."""
    half = k // 2
    pos = np.arange(n)[:, None] + rate * (np.arange(k) - half)[None, :]
    return ((pos >= 0) & (pos < n)).sum(axis=1)


def valid_weight_fraction(feature_h: int, feature_w: int, k: int, rate: int) -> float:
    """Mean share of the k*k taps that land on the unpadded feature map."""
    if feature_h < 1 or feature_w < 1 or k < 1 or k % 2 == 0 or rate < 1:
        raise ConfigurationError(f"bad arguments {(feature_h, feature_w, k, rate)}")
    ch = _axis_counts(feature_h, k, rate)
    cw = _axis_counts(feature_w, k, rate)
    return float(ch.sum() * cw.sum()) / float(feature_h * feature_w * k * k)


def valid_weight_histogram(feature_h: int, feature_w: int, k: int, rate: int) -> np.ndarray:
    """Share of output positions having exactly m valid taps, for m = 0..k*k."""
    ch = _axis_counts(feature_h, k, rate)
    cw = _axis_counts(feature_w, k, rate)
    counts = (ch[:, None] * cw[None, :]).ravel()
    return np.bincount(counts, minlength=k * k + 1) / counts.size


def he_init(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> ConvLayer:
    """Fan-in scaled Gaussian weights (std sqrt(2 / fan_in)) and zero bias."""
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k))
    return ConvLayer(w, np.zeros(c_out))
