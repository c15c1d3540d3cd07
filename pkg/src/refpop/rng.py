"""Named deterministic RNG streams.

Every stochastic component draws from a generator derived from the run seed
plus a stable tag path, so results are independent of scheduling and
reproducible bit-for-bit in deterministic mode.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_entropy(base: int, tags: tuple) -> list[int]:
    entropy = [int(base) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, (int, np.integer)):
            entropy.append(int(t) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(t).encode("utf-8")))
    return entropy


def make_rng(base: int, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(derive_entropy(base, tags)))
