"""Seeded random streams.

Every run owns one root seed. Modules derive their own counter-based
(Philox) stream from it by name, so adding draws in one module never
shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
