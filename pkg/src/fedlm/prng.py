"""Splittable counter-based randomness.

Every random decision in a run is drawn from a stream addressed by
(master seed, path), where path is a tuple of ints/strings naming the
consumer, e.g. (round, client_id, "batch").  Streams are Philox generators
keyed by a blake2b hash of the canonical path encoding, so derivation is a
pure function: the same (seed, path) always yields the same stream and
distinct paths yield independent streams, regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Prng", "derive"]


def _encode_label(label) -> bytes:
    if isinstance(label, bool):  # bool is an int subclass; keep tags distinct
        return b"b" + (b"\x01" if label else b"\x00")
    if isinstance(label, (int, np.integer)):
        return b"i" + int(label).to_bytes(16, "little", signed=True)
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + len(raw).to_bytes(4, "little") + raw
    raise TypeError(f"path labels must be int or str, got {type(label).__name__}")


class Prng:
    """Handle for one node of the derivation tree."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *labels) -> "Prng":
        return Prng(self.seed, self.path + labels)

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.seed.to_bytes(16, "little", signed=True))
        for label in self.path:
            h.update(_encode_label(label))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        """Fresh generator for this node, always starting at counter zero.

        Calling twice on the same node replays the same stream; derive a new
        child for every independent consumer.
        """
        return np.random.Generator(np.random.Philox(key=self.key()))

    def __repr__(self):
        return f"Prng(seed={self.seed}, path={self.path!r})"

    def __eq__(self, other):
        return isinstance(other, Prng) and (self.seed, self.path) == (other.seed, other.path)

    def __hash__(self):
        return hash((self.seed, self.path))


def derive(seed: int, path: tuple) -> Prng:
    """Pure function from (seed, path) to a stream handle."""
    return Prng(seed, path)
