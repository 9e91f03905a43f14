"""Dense NCHW float64 tensors and the geometric primitives built on them.

A tensor here is a plain 4-D ``numpy.ndarray`` of dtype float64 laid out as
(batch, channels, height, width), row-major with width fastest. Every
function returns a new array; nothing is modified in place.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

DTYPE = np.float64


def as_tensor(x, copy: bool = False) -> np.ndarray:
    """Validate and convert ``x`` to a contiguous 4-D float64 array."""
    arr = np.array(x, dtype=DTYPE, copy=copy, order="C") if copy else np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def zeros(n: int, c: int, h: int, w: int) -> np.ndarray:
    return np.zeros((n, c, h, w), dtype=DTYPE)


def zero_pad(x: np.ndarray, pad) -> np.ndarray:
    """Pad the spatial axes with zeros. ``pad`` is (top, bottom, left, right)."""
    top, bottom, left, right = (int(p) for p in pad)
    if min(top, bottom, left, right) < 0:
        raise ValueError(f"pad amounts must be >= 0, got {pad}")
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + top + bottom, w + left + right), dtype=DTYPE)
    out[:, :, top:top + h, left:left + w] = x
    return out


def crop(x: np.ndarray, pad) -> np.ndarray:
    """Inverse of :func:`zero_pad`: strip (top, bottom, left, right) from the borders."""
    top, bottom, left, right = (int(p) for p in pad)
    h, w = x.shape[2], x.shape[3]
    return x[:, :, top:h - bottom, left:w - right].copy()


def subsample(x: np.ndarray, stride: int) -> np.ndarray:
    """Keep rows and columns 0, s, 2s, ... (output size ceil(h/s) x ceil(w/s))."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if stride == 1:
        return x.copy()
    return np.ascontiguousarray(x[:, :, ::stride, ::stride])


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights as an (n_out, n_in) matrix.

    Row ``i`` samples source coordinate ``i * (n_in - 1) / (n_out - 1)``;
    a single output sample reads the source centre.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        # exact rational positions: i*(n_in-1)/(n_out-1)
        num = np.arange(n_out) * (n_in - 1)
        src = num / (n_out - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.clip(lo, 0, n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize of the spatial axes."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = interp_matrix(h, out_h)
    rw = interp_matrix(w, out_w)
    # rows then columns; both are plain matrix products
    tmp = np.matmul(rh, x)
    return np.ascontiguousarray(np.matmul(tmp, rw.T))


def bilinear_resize_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of :func:`bilinear_resize` applied to an upstream gradient."""
    out_h, out_w = grad_out.shape[2], grad_out.shape[3]
    if (in_h, in_w) == (out_h, out_w):
        return grad_out.copy()
    rh = interp_matrix(in_h, out_h)
    rw = interp_matrix(in_w, out_w)
    tmp = np.matmul(rh.T, grad_out)
    return np.ascontiguousarray(np.matmul(tmp, rw))


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (..., h, w) array, align-corners grid.

    Used for label maps, where interpolating class ids would be meaningless.
    """
    h, w = labels.shape[-2], labels.shape[-1]
    if (h, w) == (out_h, out_w):
        return labels.copy()

    def idx(n_in, n_out):
        if n_out == 1:
            return np.array([(n_in - 1) // 2])
        # round-half-up of i*(n_in-1)/(n_out-1) in integer arithmetic
        i = np.arange(n_out)
        return (2 * i * (n_in - 1) + (n_out - 1)) // (2 * (n_out - 1))

    return labels[..., idx(h, out_h)[:, None], idx(w, out_w)[None, :]].copy()


def flip_lr(x: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis."""
    return np.ascontiguousarray(x[..., ::-1])


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ReLU given its *output* ``y``."""
    return grad_out * (y > 0)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def spatial_mean(x: np.ndarray) -> np.ndarray:
    """Global average over (h, w); returns an (n, c, 1, 1) tensor."""
    return x.mean(axis=(2, 3), keepdims=True)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
