import numpy as np
import pytest

from atrousseg.aspp import AsppConfig
from atrousseg.backbone import make_network_spec
from atrousseg.conv import ConfigurationError
from atrousseg.gradcheck import numeric_grad, rel_error
from atrousseg.model import DeepLabV3
from atrousseg.norm import BNMode
from atrousseg.tensor import subsample


def small(seed=0, **kw):
    return DeepLabV3(make_network_spec((4, 4, 8, 8), stem_channels=4),
                     AsppConfig(base_rates=(1, 2, 3), branch_filters=4, num_classes=3, **kw), seed=seed)


def test_logit_shapes():
    m = small()
    m.set_bn_mode(BNMode.FROZEN)
    x = np.random.default_rng(0).uniform(size=(2, 3, 65, 65))
    assert m.forward(x, 16).shape == (2, 3, 5, 5)
    assert m.forward(x, 8).shape == (2, 3, 9, 9)
    assert m.forward(x, 32).shape == (2, 3, 3, 3)
    with pytest.raises(ConfigurationError):
        m.forward(x[:, :, :64, :64], 16)


def test_same_seed_same_weights():
    a, b = small(3).state_dict(), small(3).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_state_dict_names():
    names = set(small().state_dict())
    assert "stem.conv.conv.w" in names
    assert "block4.conv3.bn.running_var" in names
    assert "aspp.pool.bn.gamma" in names and "aspp.classifier.conv.b" in names
    assert not any(n.endswith("conv.b") and not n.startswith("aspp.classifier") for n in names)


def test_load_state_dict_rejects_bad_state():
    m = small()
    state = m.state_dict()
    state.pop("aspp.fuse.conv.w")
    with pytest.raises(KeyError):
        m.load_state_dict(state)
    state = m.state_dict()
    state["aspp.fuse.conv.w"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(ValueError):
        m.load_state_dict(state)


def test_frozen_parameter_names_follow_mode():
    m = small()
    m.set_bn_mode(BNMode.TRAIN)
    assert not m.frozen_parameter_names()
    m.set_bn_mode(BNMode.FROZEN)
    names = m.frozen_parameter_names()
    assert "stem.conv.bn.gamma" in names and "aspp.fuse.bn.beta" in names


def test_full_model_consistency_os8_vs_os16():
    m = small(seed=2)
    rng = np.random.default_rng(1)
    for _, bn in m.batchnorms():
        bn.running_mean[:] = rng.normal(0, 0.2, bn.channels)
        bn.running_var[:] = rng.uniform(0.5, 1.5, bn.channels)
    m.set_bn_mode(BNMode.FROZEN)
    x = rng.uniform(size=(1, 3, 97, 97))
    assert np.abs(subsample(m.forward(x, 8), 2) - m.forward(x, 16)).max() <= 1e-8


def test_end_to_end_parameter_gradient():
    m = small(seed=4)
    m.set_bn_mode(BNMode.TRAIN)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(2, 3, 33, 33))
    go = rng.normal(size=(2, 3, 3, 3))

    def f():
        saved = {k: v.copy() for k, v in m.buffers().items()}
        out = float((m.forward(x, 16, check_alignment=False) * go).sum())
        for k, v in saved.items():
            m.buffers()[k][:] = v
        return out

    m.zero_grad()
    m.forward(x, 16, check_alignment=False)
    gx = m.backward(go, need_grad_x=True)
    w = m.parameters()["block2.conv2.conv.w"][:2]
    assert rel_error(m.grads()["block2.conv2.conv.w"][:2], numeric_grad(f, w)) <= 1e-6
    corner = x[:, :1, :4, :4]  # a view: perturbing it perturbs x
    assert rel_error(gx[:, :1, :4, :4], numeric_grad(f, corner)) <= 1e-6
