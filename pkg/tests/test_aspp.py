import numpy as np
import pytest

from atrousseg.aspp import AsppConfig, AsppHead, aspp_forward, effective_rates
from atrousseg.conv import ConfigurationError, ConvLayer, atrous_conv_forward
from atrousseg.gradcheck import check_aspp
from atrousseg.norm import BNMode
from atrousseg.tensor import subsample


def _head(rng, filters=4, classes=3, in_ch=5, **kw):
    head = AsppHead(AsppConfig(branch_filters=filters, num_classes=classes, **kw), in_ch, rng)
    for _, unit in head.units():
        for bn in unit.batchnorms():
            bn.running_mean[:] = rng.normal(0, 0.3, bn.channels)
            bn.running_var[:] = rng.uniform(0.5, 1.5, bn.channels)
    return head


def test_effective_rates():
    cfg = AsppConfig()
    assert effective_rates(cfg, 16) == (6, 12, 18)
    assert effective_rates(cfg, 8) == (12, 24, 36)
    assert effective_rates(cfg, 32) == (3, 6, 9)
    assert effective_rates(AsppConfig(base_rates=(1, 2, 3)), 8) == (2, 4, 6)
    with pytest.raises(ConfigurationError):
        effective_rates(cfg, 4)


def test_config_validation_and_channels():
    with pytest.raises(ConfigurationError):
        AsppConfig(base_rates=(6, 6, 18))
    assert AsppConfig().concat_channels == 256 * 5
    assert AsppConfig(include_image_pooling=False).concat_channels == 256 * 4
    assert AsppConfig(base_rates=(6, 12, 18, 24)).num_branches == 6


def test_concat_width_for_33x33_features():
    rng = np.random.default_rng(0)
    head = AsppHead(AsppConfig(branch_filters=256, num_classes=2), 4, rng)
    head.set_bn_mode(BNMode.FROZEN)
    assert head.fuse.conv.c_in == 1280
    out = head.forward(rng.normal(size=(1, 4, 33, 33)), 16)
    assert out.shape == (1, 2, 33, 33)


def test_single_pixel_features():
    rng = np.random.default_rng(1)
    head = _head(rng)
    out = aspp_forward(head, rng.normal(size=(2, 5, 1, 1)), 16, BNMode.FROZEN)
    assert out.shape == (2, 3, 1, 1)


def test_constant_features_make_constant_pool_branch():
    rng = np.random.default_rng(2)
    head = _head(rng)
    head.set_bn_mode(BNMode.FROZEN)
    feats = np.broadcast_to(rng.normal(size=(1, 5, 1, 1)), (1, 5, 7, 7)).copy()
    head.forward(feats, 16)
    img = head.pool.forward(feats[:, :, :1, :1])
    # the pooled branch sees the 1x1 mean, which equals any pixel of a constant map
    expected = head.pool.forward(feats.mean(axis=(2, 3), keepdims=True))
    np.testing.assert_allclose(img, expected)


def test_large_rate_branch_is_centre_tap():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 5, 3, 3))
    x = rng.normal(size=(1, 5, 6, 6))
    big = atrous_conv_forward(x, ConvLayer(w, np.zeros(4), rate=6))
    centre = atrous_conv_forward(x, ConvLayer(w[:, :, 1:2, 1:2], np.zeros(4)))
    assert np.array_equal(big, centre)


def test_os8_vs_os16_consistency():
    rng = np.random.default_rng(4)
    head = _head(rng)
    head.set_bn_mode(BNMode.FROZEN)
    x16 = rng.normal(size=(2, 5, 5, 5))
    # a dense map whose even positions hold the OS16 map, as dense extraction produces
    x8 = rng.normal(size=(2, 5, 9, 9))
    x8[:, :, ::2, ::2] = x16
    y8 = head.forward(x8, 8)
    y16 = head.forward(x16, 16)
    assert np.abs(subsample(y8, 2) - y16).max() <= 1e-12


def test_removing_pool_branch_keeps_other_branches():
    rng = np.random.default_rng(5)
    with_pool = AsppHead(AsppConfig(branch_filters=3, num_classes=2), 4, np.random.default_rng(9))
    without = AsppHead(AsppConfig(branch_filters=3, num_classes=2, include_image_pooling=False), 4,
                       np.random.default_rng(9))
    assert with_pool.config.concat_channels - without.config.concat_channels == 3
    x = rng.normal(size=(2, 4, 5, 5))
    for a, b in zip(with_pool.atrous, without.atrous):
        np.testing.assert_array_equal(a.forward(x, rate=2), b.forward(x, rate=2))


def test_zero_gradient_and_pool_distribution():
    rng = np.random.default_rng(6)
    head = _head(rng)
    head.set_bn_mode(BNMode.FROZEN)
    feats = rng.normal(size=(2, 5, 4, 4))
    out = head.forward(feats, 16)
    assert not head.backward(np.zeros_like(out)).any()
    # silence every branch but the pooled one: the input gradient is then the
    # pooled gradient spread evenly, grad / (h * w), over the map
    for u in [head.branch1x1] + head.atrous:
        u.conv.weights[:] = 0.0
    out = head.forward(feats, 16)
    gx = head.backward(rng.normal(size=out.shape))
    np.testing.assert_allclose(gx, np.broadcast_to(gx[:, :, :1, :1], gx.shape), atol=1e-14)
    head.forward(feats, 8)  # at OS 8 the aligned grid pools every second position
    gx = head.backward(rng.normal(size=out.shape))
    assert np.all(gx[:, :, 1::2, :] == 0) and np.all(gx[:, :, :, 1::2] == 0)
    assert np.all(gx[:, :, ::2, ::2] != 0)


@pytest.mark.parametrize("os_", [16, 8])
@pytest.mark.parametrize("mode", ["train", "frozen"])
def test_finite_differences(os_, mode):
    errs = check_aspp(np.random.default_rng(7), output_stride=os_, bn_mode=mode, num_classes=2)
    assert max(errs.values()) <= 1e-6, errs
