"""NTSR1 tensor blobs.

Layout (all little-endian)::

    b"NTSR1"        5 bytes magic
    u8              dtype tag, 0 = float32, 1 = float64
    u32             rank
    u64 * rank      extents
    raw scalars     row-major
"""
import os
import struct

import numpy as np

MAGIC = b"NTSR1"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class NTSRError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _TAGS:
        raise NTSRError(f"NTSR1 stores float32/float64 only, got {a.dtype}")
    header = MAGIC + struct.pack("<BI", _TAGS[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[_TAGS[a.dtype]]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:5] != MAGIC:
        raise NTSRError("bad magic, not an NTSR1 blob")
    if len(buf) < 10:
        raise NTSRError("truncated NTSR1 header")
    tag, rank = struct.unpack_from("<BI", buf, 5)
    if tag not in _DTYPES:
        raise NTSRError(f"unknown dtype tag {tag}")
    off = 10 + 8 * rank
    if len(buf) < off:
        raise NTSRError("truncated NTSR1 extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, 10)
    dt = _DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + count * dt.itemsize:
        raise NTSRError(
            f"payload size {len(buf) - off} does not match shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, array):
    data = encode(array)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return decode(fh.read())
