"""Binary parameter checkpoints.

Layout (all integers little-endian):
    magic   4 bytes  'DNKT'
    version u32      currently 1
    count   u32      number of parameters
then for each parameter, in lexicographic name order:
    name_len u16, name bytes (utf-8), rank u8, extents u32 each,
    values   f32 little-endian, C order.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from ..errors import DataError
from .tensor import DTensor

MAGIC = b"DNKT"
VERSION = 1


def save_checkpoint(params: Dict[str, Union[DTensor, np.ndarray]], path) -> None:
    path = Path(path)
    blobs = []
    for name in sorted(params):
        arr = params[name]
        data = arr.data if isinstance(arr, DTensor) else np.asarray(arr)
        data = np.ascontiguousarray(data, dtype="<f4")
        nb = name.encode("utf-8")
        head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", data.ndim)
        head += struct.pack(f"<{data.ndim}I", *data.shape)
        blobs.append(head + data.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        out[name] = vals.copy()
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after last parameter")
    return out
