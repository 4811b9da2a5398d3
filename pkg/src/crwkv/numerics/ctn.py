"""The ``.ctn`` tensor container.

Layout, all little-endian::

    b"CRWK" | u32 version (=1) | u8 dtype | u8 ndim | ndim x u64 dims | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8.  The payload is the raw
row-major array, so a round trip is bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CrwkvError
from .tensor import Tensor

MAGIC = b"CRWK"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_HEAD = struct.Struct("<4sIBB")


class CtnFormatError(CrwkvError, ValueError):
    pass


def encode(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CtnFormatError(f"dtype {arr.dtype} cannot be stored in .ctn")
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return head + dims + payload


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; returns the array and the offset just past it."""
    if len(buf) - offset < _HEAD.size:
        raise CtnFormatError("truncated .ctn header")
    magic, version, code, ndim = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CtnFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CtnFormatError(f"unsupported .ctn version {version}")
    if code not in _DTYPES:
        raise CtnFormatError(f"unknown dtype code {code}")
    pos = offset + _HEAD.size
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dt.itemsize
    if len(buf) - pos < nbytes:
        raise CtnFormatError("truncated .ctn payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise CtnFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
