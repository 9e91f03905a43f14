"""Plain-text run configuration.

One ``section.key = value`` assignment per line; ``#`` starts a comment.
Tuples are comma separated, booleans are ``true``/``false``. Unknown sections
or keys are rejected. :func:`format_config` writes every key, so
``parse_config(format_config(c)) == c``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .aspp import AsppConfig
from .backbone import make_network_spec
from .evaluate import InferenceConfig
from .norm import BNMode
from .train import Stage, TrainConfig


class ConfigError(ValueError):
    pass


def _f(default, help_text):
    return field(default=default, metadata={"help": help_text})


@dataclass(frozen=True)
class ModelSection:
    channels: Tuple[int, ...] = _f((20, 40, 80, 160), "output channels of block1..block4")
    stem_channels: int = _f(20, "channels of the stride-2 stem conv")
    multi_grid: Tuple[int, ...] = _f((1, 2, 4), "unit rates of the three convs in block4 and its replicas")
    extra_blocks: int = _f(0, "replicas of block4 cascaded after it")
    bn_decay: float = _f(0.994, "running-statistics decay of every batch norm")
    init_seed: int = _f(0, "weight initialization seed")


@dataclass(frozen=True)
class AsppSection:
    rates: Tuple[int, ...] = _f((1, 2, 3), "atrous rates of the 3x3 branches at output stride 16")
    filters: int = _f(160, "filters per branch and in the fusion layer")
    image_pooling: bool = _f(True, "include the image-level pooling branch")
    pool_grid: str = _f("aligned", "image pooling grid: aligned (output-stride invariant) or dense")
    num_classes: int = _f(6, "classes including background")


@dataclass(frozen=True)
class TrainSection:
    crop: int = _f(65, "square training crop, must be N*OS+1 for every stage")
    batch: int = _f(8, "images per step")
    momentum: float = _f(0.9, "SGD momentum")
    weight_decay: float = _f(0.0, "L2 weight decay")
    power: float = _f(0.9, "poly learning-rate power")
    scale_min: float = _f(0.5, "lower bound of random rescaling")
    scale_max: float = _f(2.0, "upper bound of random rescaling")
    flip_prob: float = _f(0.5, "probability of a horizontal flip")
    stage1_os: int = _f(16, "output stride of the first stage")
    stage1_iters: int = _f(1500, "iterations of the first stage")
    stage1_lr: float = _f(0.007, "base learning rate of the first stage")
    stage2_os: int = _f(8, "output stride of the second stage")
    stage2_iters: int = _f(1500, "iterations of the second stage (0 disables it)")
    stage2_lr: float = _f(0.001, "base learning rate of the second stage")
    bn_finetune: bool = _f(True, "train batch norm in the first stage (else frozen throughout)")
    upsample_logits: bool = _f(True, "loss on upsampled logits (else on nearest-downsampled labels)")
    hard_classes: Tuple[int, ...] = _f((), "classes whose images are duplicated")
    bootstrap_factor: int = _f(1, "copies of each hard image in the sampler")
    log_every: int = _f(50, "log interval in iterations")


@dataclass(frozen=True)
class EvalSection:
    output_stride: int = _f(8, "inference output stride")
    scales: Tuple[float, ...] = _f((1.0,), "inference scales, probabilities are averaged")
    flip: bool = _f(False, "also average the left-right flipped input")


@dataclass(frozen=True)
class DataSection:
    train_manifest: str = _f("", "training manifest path")
    val_manifest: str = _f("", "validation manifest path (optional)")


@dataclass(frozen=True)
class RunSection:
    seed: int = _f(0, "seed for sampling and augmentation")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    aspp: AsppSection = field(default_factory=AsppSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    # -- conversion to the library's config objects -------------------------
    def network_spec(self):
        m = self.model
        return make_network_spec(m.channels, m.multi_grid, m.extra_blocks, m.stem_channels)

    def aspp_config(self) -> AsppConfig:
        a = self.aspp
        return AsppConfig(a.rates, a.filters, a.image_pooling, a.num_classes, a.pool_grid)

    def train_config(self) -> TrainConfig:
        t = self.train
        first = BNMode.TRAIN if t.bn_finetune else BNMode.FROZEN
        stages = [Stage(t.stage1_os, first, t.stage1_lr, t.stage1_iters)]
        if t.stage2_iters > 0:
            stages.append(Stage(t.stage2_os, BNMode.FROZEN, t.stage2_lr, t.stage2_iters))
        return TrainConfig(crop_size=t.crop, power=t.power, batch_size=t.batch, momentum=t.momentum,
                           weight_decay=t.weight_decay, scale_range=(t.scale_min, t.scale_max),
                           flip_prob=t.flip_prob, stages=tuple(stages), upsample_logits=t.upsample_logits,
                           hard_classes=t.hard_classes, bootstrap_factor=t.bootstrap_factor,
                           log_every=t.log_every)

    def inference_config(self) -> InferenceConfig:
        e = self.eval
        return InferenceConfig(e.output_stride, e.scales, e.flip)

    def with_values(self, **updates) -> "RunConfig":
        """``with_values(**{"train.crop": 33})`` -> copy with keys replaced."""
        sections = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for dotted, value in updates.items():
            sec, key = _split_key(dotted)
            sections[sec] = dataclasses.replace(sections[sec], **{key: value})
        return RunConfig(**sections)


def _split_key(dotted: str) -> Tuple[str, str]:
    if dotted.count(".") != 1:
        raise ConfigError(f"key {dotted!r} must look like section.key")
    sec, key = dotted.split(".")
    section_types = _section_types()
    if sec not in section_types:
        raise ConfigError(f"unknown section {sec!r}")
    if key not in {f.name for f in dataclasses.fields(section_types[sec])}:
        raise ConfigError(f"unknown key {dotted!r}")
    return sec, key


def _section_types() -> Dict[str, type]:
    return {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _kind(section_type: type, key: str):
    default = next(f.default for f in dataclasses.fields(section_type) if f.name == key)
    if isinstance(default, tuple):
        elem = {"hard_classes": int, "channels": int, "multi_grid": int, "rates": int}.get(key, float)
        return tuple, elem
    return type(default), None


def _parse_value(section_type: type, key: str, text: str):
    kind, elem = _kind(section_type, key)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return low == "true"
        if kind is tuple:
            return tuple(elem(p) for p in text.split(",") if p.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    section_types = _section_types()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        dotted, value = (s.strip() for s in line.split("=", 1))
        try:
            sec, key = _split_key(dotted)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        if dotted in updates:
            raise ConfigError(f"line {lineno}: {dotted} assigned twice")
        updates[dotted] = _parse_value(section_types[sec], key, value)
    cfg = base or RunConfig()
    try:
        return cfg.with_values(**updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: RunConfig) -> str:
    lines: List[str] = []
    for sec in dataclasses.fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def describe_keys() -> str:
    """Every key with its default, for ``--help``."""
    lines = []
    for sec_name, sec_type in _section_types().items():
        for f in dataclasses.fields(sec_type):
            lines.append(f"  {sec_name}.{f.name} = {_format_value(f.default)}    {f.metadata['help']}")
    return "\n".join(lines)
