import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atrousseg.conv import (ConfigurationError, ConvLayer, atrous_conv_backward, atrous_conv_forward,
                            conv2d_naive, conv2d_shift_add, dilate_kernel, valid_weight_fraction,
                            valid_weight_histogram)
from atrousseg.gradcheck import numeric_grad, rel_error
from atrousseg.tensor import subsample

from oracles import direct_conv, valid_fraction_bruteforce, zero_inserted_conv


def _random_layer(rng, c_in, c_out, k, rate, stride):
    return ConvLayer(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out), rate=rate, stride=stride)


def test_row_example():
    x = np.arange(1.0, 6.0).reshape(1, 1, 1, 5)
    # a 1x3 kernel is the middle row of a 3x3 kernel on a single-row input
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, :] = 1.0
    y = atrous_conv_forward(x, ConvLayer(w, np.zeros(1), rate=2))
    np.testing.assert_array_equal(y[0, 0, 0], [4, 6, 9, 6, 8])


def test_impulse_response():
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    w = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    y = atrous_conv_forward(x, ConvLayer(w, np.zeros(1), rate=3))[0, 0]
    expected = np.zeros((9, 9))
    for a, di in enumerate((-3, 0, 3)):
        for b, dj in enumerate((-3, 0, 3)):
            # correlation: output at centre - offset reads the impulse with tap (a, b)
            expected[4 - di, 4 - dj] = w[0, 0, a, b]
    np.testing.assert_array_equal(y, expected)


def test_rate_one_matches_direct_bit_for_bit():
    # integer-valued data keeps every partial sum exact, so summation order cannot matter
    rng = np.random.default_rng(0)
    x = rng.integers(-4, 5, size=(2, 3, 7, 6)).astype(float)
    layer = ConvLayer(rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(float), rng.integers(-2, 3, 4).astype(float))
    assert np.array_equal(atrous_conv_forward(x, layer), direct_conv(x, layer.weights, layer.bias))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(1, 6), st.integers(1, 2),
       st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
def test_matches_direct_and_zero_inserted(c_in, c_out, k, rate, stride, h, w, seed):
    rng = np.random.default_rng(seed)
    layer = _random_layer(rng, c_in, c_out, k, rate, stride)
    x = rng.normal(size=(2, c_in, h, w))
    y = atrous_conv_forward(x, layer)
    np.testing.assert_allclose(y, direct_conv(x, layer.weights, layer.bias, rate, stride), rtol=0, atol=1e-10)
    np.testing.assert_allclose(y, zero_inserted_conv(x, layer.weights, layer.bias, rate, stride), rtol=0, atol=1e-10)


def test_builtin_reference_paths_agree():
    rng = np.random.default_rng(3)
    layer = _random_layer(rng, 2, 3, 3, 2, 2)
    x = rng.normal(size=(1, 2, 8, 7))
    y = atrous_conv_forward(x, layer)
    np.testing.assert_allclose(conv2d_naive(x, layer), y, atol=1e-12)
    big = dilate_kernel(layer.weights, 2)
    assert big.shape == (3, 2, 5, 5)
    np.testing.assert_allclose(conv2d_shift_add(x, big, layer.bias, 2, layer.resolved_padding()), y, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(2, 4), st.integers(1, 12), st.integers(1, 12),
       st.integers(0, 1000))
def test_strided_equals_decimated_bit_exact(c_in, rate, stride, h, w, seed):
    rng = np.random.default_rng(seed)
    layer = _random_layer(rng, c_in, 3, 3, rate, stride)
    dense = ConvLayer(layer.weights, layer.bias, rate=rate, stride=1)
    x = rng.normal(size=(2, c_in, h, w))
    assert np.array_equal(atrous_conv_forward(x, layer), subsample(atrous_conv_forward(x, dense), stride))


def test_errors():
    layer = ConvLayer(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        atrous_conv_forward(np.zeros((1, 3, 4, 4)), layer)
    with pytest.raises(ConfigurationError):
        atrous_conv_forward(np.zeros((1, 2, 0, 4)), layer)
    with pytest.raises(ConfigurationError):
        ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ConfigurationError):
        atrous_conv_backward(np.zeros((1, 2, 4, 4)), layer, np.zeros((1, 1, 3, 3)))


def test_same_padding_amount():
    layer = ConvLayer(np.zeros((1, 1, 3, 3)), np.zeros(1), rate=5)
    assert layer.resolved_padding() == (5, 5, 5, 5)


def test_backward_zero_grad():
    rng = np.random.default_rng(1)
    layer = _random_layer(rng, 2, 3, 3, 2, 1)
    x = rng.normal(size=(1, 2, 5, 5))
    gx, gw, gb = atrous_conv_backward(x, layer, np.zeros((1, 3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_backward_bias_is_channel_sum():
    rng = np.random.default_rng(2)
    layer = _random_layer(rng, 2, 3, 3, 3, 2)
    x = rng.normal(size=(2, 2, 7, 7))
    go = rng.normal(size=atrous_conv_forward(x, layer).shape)
    _, _, gb = atrous_conv_backward(x, layer, go)
    np.testing.assert_allclose(gb, go.sum(axis=(0, 2, 3)), atol=1e-12)


def test_row_example_weight_gradient():
    x = np.arange(1.0, 6.0).reshape(1, 1, 1, 5)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, :] = 1.0
    layer = ConvLayer(w, np.zeros(1), rate=2)
    go = np.random.default_rng(0).normal(size=(1, 1, 1, 5))
    _, gw, _ = atrous_conv_backward(x, layer, go)
    num = numeric_grad(lambda: float((atrous_conv_forward(x, layer) * go).sum()), layer.weights)
    assert rel_error(gw, num) <= 1e-7


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 2), st.sampled_from([1, 3]), st.integers(0, 1000))
def test_backward_finite_differences(rate, stride, k, seed):
    rng = np.random.default_rng(seed)
    layer = _random_layer(rng, 2, 2, k, rate, stride)
    x = rng.normal(size=(1, 2, 6, 5))
    go = rng.normal(size=atrous_conv_forward(x, layer).shape)
    f = lambda: float((atrous_conv_forward(x, layer) * go).sum())
    gx, gw, gb = atrous_conv_backward(x, layer, go)
    assert rel_error(gx, numeric_grad(f, x)) <= 1e-6
    assert rel_error(gw, numeric_grad(f, layer.weights)) <= 1e-6
    assert rel_error(gb, numeric_grad(f, layer.bias)) <= 1e-6


def test_valid_weight_fraction_examples():
    assert valid_weight_fraction(65, 65, 3, 65) == pytest.approx(1 / 9, abs=1e-12)
    assert valid_weight_fraction(65, 65, 3, 1) == pytest.approx((193 / 195) ** 2, abs=1e-12)
    assert valid_weight_fraction(65, 65, 3, 1) == pytest.approx(valid_fraction_bruteforce(65, 65, 3, 1), abs=1e-12)
    assert valid_weight_fraction(10, 7, 1, 5) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 14), st.integers(1, 14), st.sampled_from([1, 3, 5]), st.integers(1, 16))
def test_valid_weight_fraction_matches_bruteforce(h, w, k, rate):
    assert valid_weight_fraction(h, w, k, rate) == pytest.approx(valid_fraction_bruteforce(h, w, k, rate), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([3, 5]), st.integers(1, 45))
def test_valid_weight_fraction_monotone(h, w, k, rate):
    f = valid_weight_fraction(h, w, k, rate)
    assert valid_weight_fraction(h, w, k, rate + 1) <= f + 1e-15
    assert valid_weight_fraction(h + 1, w, k, rate) >= f - 1e-15
    if rate >= max(h, w):
        assert f == pytest.approx(1 / k ** 2, abs=1e-15)


def test_histogram_sums_to_one_and_matches_mean():
    hist = valid_weight_histogram(65, 65, 3, 20)
    assert hist.sum() == pytest.approx(1.0)
    assert (hist * np.arange(10)).sum() / 9 == pytest.approx(valid_weight_fraction(65, 65, 3, 20))
