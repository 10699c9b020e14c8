"""Binary PGM (P5) and PPM (P6) files, 8-bit (maxval 255)."""

from __future__ import annotations

import os
from typing import Union

import numpy as np

from memroute.errors import FormatError

PathLike = Union[str, os.PathLike]


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def encode(arr: np.ndarray) -> bytes:
    """Encode a uint8 array: [H,W] as P5, [H,W,3] as P6."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"netpbm writer expects uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        return _header(b"P5", arr.shape[1], arr.shape[0]) + arr.tobytes()
    if arr.ndim == 3 and arr.shape[2] == 3:
        return _header(b"P6", arr.shape[1], arr.shape[0]) + np.ascontiguousarray(arr).tobytes()
    raise FormatError(f"cannot encode array of shape {arr.shape} as PGM/PPM")


def decode(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header")
        fields.append(int(buf[start:pos]))
    pos += 1  # the single whitespace byte before the raster
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    raster = buf[pos:pos + count]
    if len(raster) != count:
        raise FormatError(f"truncated raster: {len(raster)} of {count} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def write(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def read(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to 0..255 with rounding."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(x: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (x.astype(np.float64) / 255.0).astype(dtype)
