"""Seed-stream derivation.

Every randomized operation derives an independent child stream from a master
seed and a structural path (e.g. tree index, grid cell). Derivation uses
BLAKE2b, not Python's salted hash(), so streams are stable across processes
and platforms; this is what makes parallel execution schedule-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master_seed: int, *path: int | str) -> int:
    """Derive a 64-bit seed from a master seed and a path of ints/strings."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(master_seed).to_bytes(8, "little", signed=False))
    for part in path:
        if isinstance(part, str):
            raw = part.encode("utf-8")
            h.update(b"s")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        else:
            h.update(b"i")
            h.update(int(part).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def child_rng(master_seed: int, *path: int | str) -> np.random.Generator:
    return np.random.default_rng(child_seed(master_seed, *path))
