"""Binary tensor file format.

Layout: 8-byte magic "TNSR0001", little-endian u32 rank, rank little-endian
u64 dims, then the float64 payload in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR0001"


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(arr.astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise TensorFormatError("bad magic in tensor blob")
    off = len(MAGIC)
    (rank,) = struct.unpack_from("<I", raw, off)
    off += 4
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from("<Q", raw, off)
        dims.append(int(d))
        off += 8
    count = int(np.prod(dims)) if dims else 1
    expect = off + 8 * count
    if len(raw) != expect:
        raise TensorFormatError(f"payload size mismatch: have {len(raw)}, want {expect}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    return data.reshape(dims).astype(np.float64)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
