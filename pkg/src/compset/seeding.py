"""Named, reproducible RNG substreams.

Every stochastic step in the package (init, shuffling, synthetic sampling,
replacement draws) pulls its own generator from a root seed plus a tag path,
so adding or reordering one consumer never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(seed: int, *tags) -> np.random.SeedSequence:
    """SeedSequence keyed by the root seed and a stable hash of each tag."""
    keys = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        keys.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.SeedSequence(keys)


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the (seed, *tags) stream."""
    return np.random.default_rng(seed_sequence(seed, *tags))
