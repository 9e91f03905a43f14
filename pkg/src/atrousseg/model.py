"""Backbone + ASPP head behind a single parameter namespace."""
from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from .aspp import AsppConfig, AsppHead
from .backbone import Backbone, CompiledNetwork, NetworkSpec, convert_to_output_stride, make_network_spec
from .norm import BNMode
from .tensor import DTYPE


class DeepLabV3:
    """Segmentation network whose weights are independent of the output stride.

    ``forward(x, output_stride)`` compiles (and caches) the backbone for the
    requested stride; switching strides reuses every weight.
    """

    def __init__(self, spec: NetworkSpec | None = None, aspp: AsppConfig | None = None, seed: int = 0,
                 bn_decay: float = 0.9997):
        self.spec = spec or make_network_spec()
        self.aspp_config = aspp or AsppConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.spec, rng, bn_decay)
        self.head = AsppHead(self.aspp_config, self.backbone.out_channels, rng, bn_decay)
        self._compiled: Dict[int, CompiledNetwork] = {}
        self._last_os = None

    # -- structure -----------------------------------------------------------
    def compiled(self, output_stride: int) -> CompiledNetwork:
        if output_stride not in self._compiled:
            self._compiled[output_stride] = convert_to_output_stride(self.spec, output_stride)
        return self._compiled[output_stride]

    def units(self):
        yield from self.backbone.units()
        yield from self.head.units()

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{p}": arr for name, unit in self.units() for p, arr in unit.params()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{b}": arr for name, unit in self.units() for b, arr in unit.buffers()}

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, unit in self.units():
            for p, arr in unit.params():
                out[f"{name}.{p}"] = unit.grads.get(p, np.zeros_like(arr))
        return out

    def batchnorms(self) -> Iterator[Tuple[str, object]]:
        for name, unit in self.units():
            for bn in unit.batchnorms():
                yield name, bn

    def set_bn_mode(self, mode: BNMode) -> None:
        for _, bn in self.batchnorms():
            bn.mode = BNMode(mode)

    def frozen_parameter_names(self) -> set:
        """Affine BN parameters of frozen BN layers; the optimizer skips them."""
        return {f"{name}.bn.{p}" for name, bn in self.batchnorms() if bn.mode is BNMode.FROZEN
                for p in ("gamma", "beta")}

    def zero_grad(self) -> None:
        for _, unit in self.units():
            unit.grads = {}

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        units = dict(self.units())
        expected = set(self.parameters()) | set(self.buffers())
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for key in expected:
            unit_name, rest = key.rsplit(".", 2)[0], ".".join(key.rsplit(".", 2)[1:])
            unit = units[unit_name]
            value = np.array(state[key], dtype=DTYPE)
            holder, attr = rest.split(".")
            obj = unit.conv if holder == "conv" else unit.bn
            if attr == "w":
                attr = "weights"
            elif attr == "b":
                attr = "bias"
            current = getattr(obj, attr)
            if current.shape != value.shape:
                raise ValueError(f"{key}: shape {value.shape} != {current.shape}")
            setattr(obj, attr, value)

    # -- computation ---------------------------------------------------------
    def forward(self, x: np.ndarray, output_stride: int, check_alignment: bool = True) -> np.ndarray:
        """Logits at feature resolution for images ``x`` with values in [0, 1]."""
        compiled = self.compiled(output_stride)
        x = 2.0 * np.asarray(x, dtype=DTYPE) - 1.0
        feats = self.backbone.forward(x, compiled, check=check_alignment)
        self._last_os = output_stride
        return self.head.forward(feats, output_stride)

    def backward(self, grad_logits: np.ndarray, need_grad_x: bool = False):
        g = self.head.backward(grad_logits)
        gx = self.backbone.backward(g, need_grad_x=need_grad_x)
        return None if gx is None else 2.0 * gx

    __call__ = forward
