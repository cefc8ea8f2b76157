"""EMB1 file writing, plus the header parse needed for overwrite checks.

Layout, all little-endian: 4-byte magic ``EMB1``, u32 vector count, u32
dimension, ``count * dimension`` float32 values in row-major order, then the
UTF-8 ids separated by newlines (with a trailing newline when any id exists).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<II")


def write_emb1(path: str | Path, matrix: np.ndarray, ids: Sequence[str]) -> Path:
    """Write one embedding matrix with its ids; deterministic bytes."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2D")
    if matrix.shape[0] != len(ids):
        raise ValueError("id count must match matrix rows")
    for ref in ids:
        if "\n" in ref or "\r" in ref:
            raise ValueError(f"id {ref!r} contains a newline")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(_HEADER.pack(matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes(order="C"))
        fh.write(("\n".join(ids) + "\n" if ids else "").encode("utf-8"))
    return path


def read_emb1_header(path: str | Path) -> tuple[int, int]:
    """Return (count, dimension) from an existing EMB1 file."""
    with open(path, "rb") as fh:
        prefix = fh.read(4 + _HEADER.size)
    if prefix[:4] != EMB1_MAGIC:
        raise ValueError(f"not an EMB1 file: {path}")
    if len(prefix) < 4 + _HEADER.size:
        raise ValueError(f"truncated EMB1 header: {path}")
    count, dim = _HEADER.unpack_from(prefix, 4)
    return count, dim
