"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MMC1" | count | { name_len | name (utf-8) | ndim | dims[ndim] | f64 payload }*
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MMC1"


class CheckpointError(ValueError):
    """Raised for a malformed or truncated checkpoint."""


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes; not an MMC1 checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more)")
        out = blob[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor name is not valid utf-8: {exc}") from None
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        payload = np.frombuffer(take(8 * size), dtype="<f8")
        tensors[name] = payload.reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    return tensors


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
