"""CKPT1 checkpoint format.

Layout (all little-endian): magic b"CKPT1", u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, u32 dims, f32 data.
Save/load round trips are byte-exact; names keep dict insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CKPT1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]!r}...")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        if arr32.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} rank {arr32.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr32.ndim))
        parts.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        parts.append(arr32.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n_values, offset=pos).reshape(dims)
            pos += 4 * n_values
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated checkpoint record: {exc}") from exc
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data.copy()
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after last tensor")
    return out
