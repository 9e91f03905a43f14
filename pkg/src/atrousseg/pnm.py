"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""
from __future__ import annotations

import os
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, os.PathLike]
_WHITESPACE = b" \t\n\r\v\f"


class PnmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _parse_header(data: bytes) -> Tuple[bytes, int, int, int, int]:
    """Return (magic, width, height, maxval, payload offset)."""
    if len(data) < 2:
        raise PnmError("file too short for a PNM magic number", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    values = []
    while len(values) < 3:
        # whitespace and comments may separate any two header tokens
        while pos < len(data) and (data[pos] in _WHITESPACE or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\n\r":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] in b"0123456789":
            pos += 1
        if start == pos:
            if pos >= len(data):
                raise PnmError("truncated header", pos)
            raise PnmError(f"expected a decimal number, found {data[pos:pos + 1]!r}", pos)
        values.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise PnmError("header must end with a single whitespace character", pos)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PnmError(f"bad dimensions {width}x{height}", pos)
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}", pos)
    return magic, width, height, maxval, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5 to an (h, w) uint8 array or P6 to (h, w, 3)."""
    magic, width, height, _, offset = _parse_header(data)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise PnmError(f"truncated payload: expected {need} bytes, found {len(payload)}", offset + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"PNM data must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (h, w) or (h, w, 3) array, got {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def _read(path: PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def read_pgm(path: PathLike) -> np.ndarray:
    data = _read(path)
    if data[:2] != b"P5":
        raise PnmError(f"not a binary PGM (magic {data[:2]!r})", 0)
    return decode_pnm(data)


def read_ppm(path: PathLike) -> np.ndarray:
    data = _read(path)
    if data[:2] != b"P6":
        raise PnmError(f"not a binary PPM (magic {data[:2]!r})", 0)
    return decode_pnm(data)


def write_pgm(path: PathLike, arr: np.ndarray) -> None:
    if np.asarray(arr).ndim != 2:
        raise ValueError("PGM data must be 2-D")
    with open(path, "wb") as fh:
        fh.write(encode_pnm(arr))


def write_ppm(path: PathLike, arr: np.ndarray) -> None:
    if np.asarray(arr).ndim != 3:
        raise ValueError("PPM data must be (h, w, 3)")
    with open(path, "wb") as fh:
        fh.write(encode_pnm(arr))


def image_to_tensor(rgb: np.ndarray) -> np.ndarray:
    """(h, w, 3) uint8 -> (3, h, w) float64 in [0, 1]."""
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def tensor_to_image(chw: np.ndarray) -> np.ndarray:
    """(3, h, w) float in [0, 1] -> (h, w, 3) uint8, rounding to nearest."""
    return np.clip(np.rint(np.asarray(chw) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0).copy()
