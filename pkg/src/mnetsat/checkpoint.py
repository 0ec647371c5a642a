"""MSAT1 checkpoint container.

Layout: the 5-byte magic ``MSAT1`` followed by records until end of file.
Each record is ``u32 name_len | utf-8 name | u32 rank | rank x u32 extents |
float32 data`` with every integer and float little-endian.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MSAT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    seen = set()
    chunks = [MAGIC]
    for name, arr in arrays.items():
        if name in seen:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: not an MSAT1 checkpoint")
    pos = 5
    out: dict[str, np.ndarray] = {}

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated record")
        chunk = blob[pos : pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in out:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        out[name] = data.astype(np.float32)
    return out
