import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atrousseg.tensor import (bilinear_resize, bilinear_resize_backward, crop, interp_matrix, nearest_resize,
                              softmax, log_softmax, subsample, zero_pad)


def test_zero_pad_identity():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(zero_pad(x, (0, 0, 0, 0)), x)


def test_zero_pad_single_value():
    out = zero_pad(np.full((1, 1, 1, 1), 5.0), (1, 1, 1, 1))
    expected = np.zeros((1, 1, 3, 3))
    expected[0, 0, 1, 1] = 5.0
    np.testing.assert_array_equal(out, expected)


def test_zero_pad_shape_and_interior():
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 4))
    out = zero_pad(x, (2, 1, 0, 3))
    assert out.shape == (1, 2, 7, 7)
    # index-shift oracle
    np.testing.assert_array_equal(out[:, :, 2:6, 0:4], x)
    assert out.sum() == pytest.approx(x.sum(), abs=1e-12)
    mask = np.ones(out.shape, bool)
    mask[:, :, 2:6, 0:4] = False
    assert np.all(out[mask] == 0.0)


def test_zero_pad_rejects_negative():
    with pytest.raises(ValueError):
        zero_pad(np.zeros((1, 1, 2, 2)), (0, -1, 0, 0))


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.integers(0, 3)] * 4), st.integers(1, 5), st.integers(1, 5))
def test_pad_then_crop_is_identity(pad, h, w):
    x = np.random.default_rng(h * 7 + w).normal(size=(2, 3, h, w))
    np.testing.assert_array_equal(crop(zero_pad(x, pad), pad), x)


def test_subsample_grid():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    np.testing.assert_array_equal(subsample(x, 2)[0, 0], [[0, 2, 4], [10, 12, 14], [20, 22, 24]])
    assert subsample(np.zeros((1, 1, 4, 4)), 2).shape == (1, 1, 2, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_subsample_shape_and_identity(h, w, s):
    x = np.random.default_rng(0).normal(size=(1, 2, h, w))
    assert subsample(x, s).shape == (1, 2, -(-h // s), -(-w // s))
    assert np.array_equal(subsample(x, 1), x)


def test_bilinear_identity_and_examples():
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 7))
    np.testing.assert_allclose(bilinear_resize(x, 5, 7), x, atol=1e-12)
    row = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
    np.testing.assert_allclose(bilinear_resize(row, 1, 3)[0, 0, 0], [0, 1, 2])
    sq = np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 2, 2)
    out = bilinear_resize(sq, 3, 3)
    assert out[0, 0, 1, 1] == pytest.approx(3.0, abs=1e-15)


def test_interp_single_output_reads_centre():
    m = interp_matrix(5, 1)
    np.testing.assert_allclose(m, [[0, 0, 1, 0, 0]])
    m = interp_matrix(4, 1)
    np.testing.assert_allclose(m, [[0, 0.5, 0.5, 0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_bilinear_round_trip_on_grid_points(kh, kw):
    h, w = 2 ** kh + 1, 2 ** kw + 1
    x = np.random.default_rng(h * w).normal(size=(1, 2, h, w))
    up = bilinear_resize(x, 2 * h - 1, 2 * w - 1)
    np.testing.assert_allclose(up[:, :, ::2, ::2], x, atol=1e-10)
    np.testing.assert_allclose(bilinear_resize(up, h, w), x, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_bilinear_convex_and_corners(h, w, oh, ow):
    x = np.random.default_rng(oh * ow).normal(size=(1, 1, h, w))
    y = bilinear_resize(x, oh, ow)
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12
    if oh > 1 and ow > 1:
        assert y[0, 0, 0, 0] == x[0, 0, 0, 0]
        assert y[0, 0, -1, -1] == pytest.approx(x[0, 0, -1, -1], abs=1e-14)


def test_bilinear_backward_is_transpose():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 6))
    g = rng.normal(size=(2, 3, 9, 5))
    lhs = (bilinear_resize(x, 9, 5) * g).sum()
    rhs = (x * bilinear_resize_backward(g, 4, 6)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_nearest_resize_keeps_alphabet():
    lab = np.random.default_rng(3).integers(0, 4, size=(2, 17, 17)).astype(np.uint8)
    out = nearest_resize(lab, 5, 5)
    assert out.dtype == lab.dtype and out.shape == (2, 5, 5)
    # align-corners grid: output i reads input 4*i
    np.testing.assert_array_equal(out, lab[:, ::4, ::4])


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(4).normal(size=(2, 5, 3, 3)) * 50
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)
