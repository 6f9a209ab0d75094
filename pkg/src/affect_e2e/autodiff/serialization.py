"""Binary tensor container.

Layout (all little-endian)::

    b"TNSR" | version u32 | rank u32 | dims u64 * rank | data f64 * prod(dims)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from affect_e2e.errors import DataError

MAGIC = b"TNSR"
VERSION = 1


def encode_tensor(array) -> bytes:
    array = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<II", VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes(order="C")


def decode_tensor(blob: bytes, path=None) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError("not a TNSR container (bad magic)", path, 0)
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported TNSR version {version}", path, 4)
    offset = 12
    if len(blob) < offset + 8 * rank:
        raise DataError("truncated TNSR header", path, offset)
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 8 * count:
        raise DataError(f"expected {count} float64 values after header", path, offset)
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_tensor(path, array) -> None:
    write_atomic(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError("tensor file not found", path)
    return decode_tensor(path.read_bytes(), path)
