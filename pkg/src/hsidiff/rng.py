"""Deterministic, splittable random streams.

Every random draw in the toolkit goes through :func:`stream`, which keys a
Philox counter-based generator by ``(seed, *keys)``.  Two streams with
different keys are statistically independent, and a stream's output never
depends on how many other streams were created before it, so band-level or
sample-level work can be done in any order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Return a generator for the substream ``(seed, *keys)``.

    Keys may be non-negative ints or strings (strings are hashed with CRC32).
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
