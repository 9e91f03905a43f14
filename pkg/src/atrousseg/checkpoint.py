"""Flat binary checkpoints.

Layout (little endian)::

    b"DLV3"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 ndim, ndim x u64 dim, f64 data[prod(dims)] }

Names are stored in insertion order, so read -> write reproduces the bytes.
Model weights and BN statistics use the model's parameter names, optimizer
momenta are prefixed ``momentum.``, the architecture is recorded under
``arch.*`` and the global step under ``iteration``.
"""
from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"DLV3"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(arrays: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(data):
                raise CheckpointError(f"truncated array {name!r} at byte {pos}")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after {count} arrays")
    return out


def write_checkpoint(path, arrays: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def model_arrays(model, optimizer=None, iteration: int = 0) -> Dict[str, np.ndarray]:
    """Everything needed to rebuild and resume ``model``."""
    spec, aspp = model.spec, model.aspp_config
    arrays: Dict[str, np.ndarray] = {
        "arch.channels": np.array([b.channels for b in spec.blocks[:4]], dtype=float),
        "arch.stem_channels": np.array([spec.stem.channels], dtype=float),
        "arch.multi_grid": np.array(spec.blocks[3].unit_rates, dtype=float),
        "arch.extra_blocks": np.array([len(spec.blocks) - 4], dtype=float),
        "arch.aspp_rates": np.array(aspp.base_rates, dtype=float),
        "arch.aspp_filters": np.array([aspp.branch_filters], dtype=float),
        "arch.image_pooling": np.array([float(aspp.include_image_pooling)]),
        "arch.image_pool_aligned": np.array([float(aspp.image_pool_grid == "aligned")]),
        "arch.num_classes": np.array([aspp.num_classes], dtype=float),
    }
    arrays.update(model.state_dict())
    if optimizer is not None:
        for k, v in optimizer.velocity.items():
            arrays[f"momentum.{k}"] = v
    arrays["iteration"] = np.array([float(iteration)])
    return arrays


def model_from_arrays(arrays: Dict[str, np.ndarray]):
    """Rebuild a model (and optimizer momenta) from :func:`model_arrays` output."""
    from .aspp import AsppConfig
    from .backbone import make_network_spec
    from .model import DeepLabV3
    from .train import SGD

    ints = lambda k: tuple(int(v) for v in arrays[k].ravel())
    spec = make_network_spec(ints("arch.channels"), ints("arch.multi_grid"),
                             ints("arch.extra_blocks")[0], ints("arch.stem_channels")[0])
    aspp = AsppConfig(ints("arch.aspp_rates"), ints("arch.aspp_filters")[0],
                      bool(ints("arch.image_pooling")[0]), ints("arch.num_classes")[0],
                      "aligned" if ints("arch.image_pool_aligned")[0] else "dense")
    model = DeepLabV3(spec, aspp)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith(("arch.", "momentum.", "iteration"))})
    opt = SGD()
    opt.velocity = {k[len("momentum."):]: v for k, v in arrays.items() if k.startswith("momentum.")}
    iteration = int(arrays["iteration"][0]) if "iteration" in arrays else 0
    return model, opt, iteration
