"""Flat binary tensor serialization.

Layout, all little-endian:

    bytes 0..3   magic "HTEN"
    byte  4      format version (currently 1)
    byte  5      rank r (0..8)
    next 4*r     dims, uint32 each
    rest         float32 payload, row-major, prod(dims) elements

Rank 0 is a scalar with a 1-element payload. Readers validate magic,
version, rank, and exact payload length before touching the data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HTEN"
VERSION = 1
MAX_RANK = 8


def write_hten(path, array) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds max {MAX_RANK}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise FormatError(f"dimension too large for u32: {arr.shape}")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    # ascontiguousarray promotes 0-d to 1-d, so rank is taken above
    payload = np.ascontiguousarray(arr).astype("<f4").tobytes(order="C")
    Path(path).write_bytes(header + payload)


def read_hten(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<BB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds max {MAX_RANK}")
    dim_end = 6 + 4 * rank
    if len(raw) < dim_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 6) if rank else ()
    count = 1
    for d in dims:
        count *= d
    expected = dim_end + 4 * count
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw) - dim_end} bytes, "
            f"expected {4 * count} for shape {dims}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=dim_end, count=count)
    return data.reshape(dims).astype(np.float32, copy=True)
