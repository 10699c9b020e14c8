"""MRT1 tensor files.

Layout: magic ``MRT1``, one byte dtype code (0 = f32, 1 = f64), one byte ndim,
``ndim`` little-endian u64 dims, then the raw little-endian values in row-major
order.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Union

import numpy as np

from memroute.errors import FormatError
from memroute.tensor.core import Tensor

MAGIC = b"MRT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_LE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODES:
        raise FormatError(f"MRT1 stores f32/f64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("MRT1 supports at most 255 dims")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_LE[code]).tobytes()


def loads(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an MRT1 file (bad magic)")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _LE:
        raise FormatError(f"unknown MRT1 dtype code {code}")
    off = 6 + 8 * ndim
    if len(buf) < off:
        raise FormatError("truncated MRT1 header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    dt = _LE[code]
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"MRT1 payload is {len(buf) - off} bytes, expected {count * dt.itemsize}")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=count).reshape(dims)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))


def save(path: Union[str, os.PathLike], t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load(path_or_file: Union[str, os.PathLike, BinaryIO]) -> Tensor:
    if hasattr(path_or_file, "read"):
        return loads(path_or_file.read())
    with open(path_or_file, "rb") as fh:
        return loads(fh.read())
