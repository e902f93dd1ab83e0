"""WTNS binary tensor format.

Layout: magic ``WTNS``, version byte (1), dtype byte (1 = float32, 2 = float64),
rank byte, ``rank`` little-endian u32 extents, then row-major little-endian data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"WTNS"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or incompatible binary file."""


def encode(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; WTNS stores float32/float64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[dt], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; return it and the offset just past it."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad magic: not a WTNS tensor")
    version, code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise FormatError(f"unsupported WTNS version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + count * dt.itemsize
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), end


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr
