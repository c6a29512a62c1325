"""Raw tensor files in the ``MCT1`` format.

Layout: 4-byte magic ``MCT1``, u8 rank, rank x u32 little-endian dims, then a
little-endian float32 row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MCT1"


def dumps(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds u8")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected MCT1")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise FormatError(f"truncated header: rank {rank} needs {off} bytes, got {len(buf)}")
    shape = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(
            f"payload size mismatch for shape {shape}: expected {4 * count} bytes, got {len(buf) - off}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
