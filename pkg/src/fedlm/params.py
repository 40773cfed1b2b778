"""Named parameter collections and their binary serialization.

A ParameterSet maps tensor names to float64 arrays plus two flags:
freezable (may be frozen by partial-variable training) and trainable (the
per-round decision).  Iteration is always in lexicographic name order so
that reductions and serialization are deterministic.

Checkpoint format (magic FEDLM1): u32 tensor count, then per tensor
u16 name length, name bytes (utf-8), u8 rank, u32 per dim, raw float64
little-endian values.  Flags are not stored; they are a property of the
model architecture and are re-attached on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CHECKPOINT_MAGIC",
    "Param",
    "ParameterSet",
    "load_checkpoint",
    "read_tensor_map",
    "save_checkpoint",
    "write_tensor_map",
]

CHECKPOINT_MAGIC = b"FEDLM1"


@dataclass
class Param:
    value: np.ndarray
    freezable: bool = False
    trainable: bool = True


class ParameterSet:
    """Ordered name -> Param map (lexicographic iteration order)."""

    def __init__(self, params: dict[str, Param] | None = None):
        self._params: dict[str, Param] = {}
        for name in sorted(params or {}):
            self._params[name] = params[name]

    def add(self, name: str, value: np.ndarray, freezable: bool = False):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        self._params[name] = Param(np.asarray(value, dtype=np.float64), freezable)
        # keep lexicographic order regardless of insertion order
        self._params = {k: self._params[k] for k in sorted(self._params)}

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values_map(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self._params.items()}

    def trainable_items(self):
        return ((n, p) for n, p in self._params.items() if p.trainable)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.trainable]

    def freezable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.freezable]

    def total_count(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def trainable_count(self) -> int:
        return sum(p.value.size for p in self._params.values() if p.trainable)

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, p in self._params.items():
            out._params[name] = Param(p.value.copy(), p.freezable, p.trainable)
        return out

    def set_trainable(self, mask: dict[str, bool]):
        for name, p in self._params.items():
            p.trainable = bool(mask.get(name, True))

    def all_trainable(self):
        for p in self._params.values():
            p.trainable = True


# ---- binary tensor maps ------------------------------------------------------


def write_tensor_map(fh, tensors: dict[str, np.ndarray]):
    """Write a name -> float64 array map in deterministic (sorted) order."""
    names = sorted(tensors)
    fh.write(struct.pack("<I", len(names)))
    for name in names:
        # not ascontiguousarray: that would silently promote 0-d arrays to 1-d
        arr = np.asarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor rank too large: {arr.ndim}")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor_map(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = _read_exact(fh, 8 * n)
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError("truncated tensor map")
    return raw


def save_checkpoint(path, tensors: dict[str, np.ndarray] | ParameterSet):
    if isinstance(tensors, ParameterSet):
        tensors = tensors.values_map()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        write_tensor_map(fh, tensors)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        return read_tensor_map(fh)
