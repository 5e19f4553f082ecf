"""Minimal binary tensor container used for patches, cubes and checkpoints.

Layout, all little-endian:

    bytes 0..3   magic "LCZT"
    byte  4      format version (1)
    byte  5      element type: 0 = uint8, 1 = float32, 2 = uint16
    byte  6      number of dimensions
    then         ndim x uint32 dimension sizes
    then         raw row-major payload

The payload length must match the dimensions exactly; trailing bytes are an
error so truncated or concatenated files fail loudly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"LCZT"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<u2")}
_KIND_TO_CODE = {"uint8": 0, "float32": 1, "uint16": 2}

HEADER_FIXED = struct.Struct("<4sBBB")


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    name = arr.dtype.name
    if name not in _KIND_TO_CODE:
        raise FormatError(
            f"dtype {arr.dtype} not storable; use uint8, float32 or uint16"
        )
    if arr.ndim < 1 or arr.ndim > 255:
        raise FormatError(f"tensor rank {arr.ndim} outside 1..255")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError(f"dimension too large for u32: {arr.shape}")
    code = _KIND_TO_CODE[name]
    head = HEADER_FIXED.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code]).tobytes()
    return head + dims + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER_FIXED.size:
        raise FormatError(f"container truncated at {len(buf)} bytes")
    magic, version, code, ndim = HEADER_FIXED.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown element-type code {code}")
    if ndim < 1:
        raise FormatError("tensor rank must be at least 1")
    dims_end = HEADER_FIXED.size + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("container truncated inside the dimension list")
    shape = struct.unpack_from(f"<{ndim}I", buf, HEADER_FIXED.size)
    dtype = _CODE_TO_DTYPE[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = buf[dims_end:]
    if len(payload) != expected:
        raise FormatError(
            f"payload is {len(payload)} bytes, dimensions {shape} need {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
