"""Binary tensor container used for datasets, checkpoints, and exports.

Layout, all little-endian:

    bytes 0..3   magic "NVST"
    byte  4      format version (currently 1)
    byte  5      dtype code: 0 = float32, 1 = float64
    byte  6      ndim
    next 8*ndim  dims as u64
    rest         raw row-major payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_nvst", "read_nvst", "NvstFormatError", "MAGIC", "VERSION"]

MAGIC = b"NVST"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class NvstFormatError(ValueError):
    """File is not a well-formed NVST container."""


def write_nvst(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODE_FOR:
        array = array.astype(np.float64)
    code = _CODE_FOR[array.dtype]
    payload = np.ascontiguousarray(array).astype(_DTYPE_CODES[code], copy=False)
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape) if array.ndim else b""
    Path(path).write_bytes(header + payload.tobytes())


def read_nvst(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise NvstFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise NvstFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise NvstFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise NvstFormatError(f"{path}: unknown dtype code {code}")
    offset = 7 + 8 * ndim
    if len(raw) < offset:
        raise NvstFormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{ndim}Q", raw[7:offset]) if ndim else ()
    dtype = _DTYPE_CODES[code]
    expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    if len(raw) - offset != expect:
        raise NvstFormatError(
            f"{path}: payload is {len(raw) - offset} bytes, dims {dims} need {expect}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims).copy()
