"""Versioned binary container for named float64 matrices.

Layout (all integers little-endian):

    8 bytes   magic ``CFMPBLK1``
    u32       block count
    per block, sorted by name:
        u16   name length in bytes
        ...   name (utf8)
        u32   rows
        u32   cols
        ...   rows*cols float64 values, row-major

The sort plus fixed-width encoding makes save/load/save byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataFormatError
from .optim import ParamStore

MAGIC = b"CFMPBLK1"


def write_blocks(path, mapping: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(mapping))]
    for name in sorted(mapping):
        arr = np.ascontiguousarray(mapping[name], dtype=np.float64)
        if arr.ndim != 2:
            raise DataFormatError("block %r is not 2D (shape %s)"
                                  % (name, arr.shape))
        raw = name.encode("utf8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        chunks.append(arr.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def read_blocks(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise DataFormatError("%s: bad magic, not a cfmplan block file" % path)
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf8")
            off += nlen
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            nbytes = rows * cols * 8
            buf = data[off:off + nbytes]
            if len(buf) != nbytes:
                raise DataFormatError("%s: truncated block %r" % (path, name))
            off += nbytes
        except struct.error as exc:
            raise DataFormatError("%s: truncated header (%s)" % (path, exc))
        if name in out:
            raise DataFormatError("%s: duplicate block %r" % (path, name))
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy()
    if off != len(data):
        raise DataFormatError("%s: %d trailing bytes" % (path, len(data) - off))
    return out


def save_params(path, store: ParamStore) -> None:
    write_blocks(path, store.blocks)


def load_params(path) -> ParamStore:
    store = ParamStore()
    for name, arr in sorted(read_blocks(path).items()):
        store.add(name, arr)
    return store
