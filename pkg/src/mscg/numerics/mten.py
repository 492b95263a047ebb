"""MTEN v1 tensor files.

Layout: ``b"MTEN"``, version byte ``0x01``, dtype byte, rank byte, ``rank``
little-endian u32 extents, then the row-major little-endian payload.

dtype codes: 0 = f32, 1 = u8, 2 = f64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTEN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}


class MtenError(ValueError):
    pass


def dumps(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = CODES.get(np.dtype(arr.dtype.name))
    if code is None:
        raise MtenError(f"MTEN cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise MtenError("rank exceeds 255")
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise MtenError("not an MTEN buffer (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise MtenError(f"unsupported MTEN version {version}")
    if code not in DTYPES:
        raise MtenError(f"unknown MTEN dtype code {code}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise MtenError("truncated MTEN header")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != expected:
        raise MtenError(f"MTEN payload is {len(buf) - off} bytes, header implies {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        return loads(path.read_bytes())
    except MtenError as exc:
        raise MtenError(f"{path}: {exc}") from None
