"""Binary parameter checkpoints.

Layout: magic bytes ``PXG1``, then one record per parameter, sorted by
name: u64 name length, the UTF-8 name, u64 rank, the extents as u64, the
values as float64. All integers and floats are little-endian. Round-trips
are bitwise exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"PXG1"


def save_checkpoint(path, params: dict) -> None:
    chunks = [MAGIC]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value,
                         dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic", byte_offset=0)
    pos = 4
    params: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated reading {what}", byte_offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        raw = take(8 * count, f"data for {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params


def diff_parameters(expected: dict, got: dict) -> list[str]:
    """Human-readable name/shape differences; empty when compatible."""
    problems = []
    for name in sorted(set(expected) - set(got)):
        problems.append(f"  missing from checkpoint: {name} {tuple(expected[name])}")
    for name in sorted(set(got) - set(expected)):
        problems.append(f"  unexpected in checkpoint: {name} {tuple(got[name])}")
    for name in sorted(set(expected) & set(got)):
        if tuple(expected[name]) != tuple(got[name]):
            problems.append(
                f"  shape mismatch for {name}: model {tuple(expected[name])} "
                f"vs checkpoint {tuple(got[name])}"
            )
    return problems
