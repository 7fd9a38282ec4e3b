"""Binary checkpoint format for named float64 tensors (HAMC v1).

Layout, all little-endian:

    magic   4 bytes  "HAMC"
    version u32      currently 1 (readers must reject anything else)
    count   u32      number of tensor records
    per tensor:
        name_len u16, name UTF-8 bytes,
        rank u8, rank x u32 dims,
        prod(dims) x f64 values, row-major

Writing the result of a read reproduces the input byte for byte: record
order is preserved and values are not touched.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HAMC"
VERSION = 1


class CheckpointFormatError(ValueError):
    """The file is not a readable HAMC checkpoint."""


def write_checkpoint(path, tensors):
    """Write [(name, array), ...] records; arrays are converted to f64."""
    items = list(tensors.items()) if isinstance(tensors, dict) else list(tensors)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {len(raw)} bytes")
        if arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor rank too large: {arr.ndim}")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path):
    """Read records back as an ordered dict of name -> float64 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: missing HAMC magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unknown checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64).copy()
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes after last record")
    return out
