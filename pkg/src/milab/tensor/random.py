"""Seeded, splittable random streams (Philox counter-based generator)."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def rng(seed: int, *path) -> np.random.Generator:
    """Generator for the stream named by ``path`` under ``seed``.

    Distinct paths give independent streams; the same (seed, path) always
    reproduces the same stream.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
