"""Deterministic seed derivation.

One master seed fans out to every randomized stage. String parts are hashed
with crc32 (stable across processes and platforms, unlike ``hash()``), so a
stream depends only on (master, purpose, ...) and never on iteration order
or parallel scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(master: int, *parts: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=tuple(_key(p) for p in parts))


def rng_for(master: int, *parts: int | str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master, *parts))


def derive_seed(master: int, *parts: int | str) -> int:
    """Collapse a derived stream to a single integer seed."""
    return int(seed_sequence(master, *parts).generate_state(1, dtype=np.uint64)[0])
