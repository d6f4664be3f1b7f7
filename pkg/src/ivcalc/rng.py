"""Counter-based RNG substreams.

Every random draw in the package goes through :func:`substream`, which maps a
root seed plus an integer key path to an independent ``numpy`` generator.  The
mapping depends only on the keys, so parallel workers reproduce the same draws
regardless of scheduling order.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        # derive deterministically from the generator state
        return np.random.SeedSequence(int(seed.integers(0, 2**63 - 1)))
    return np.random.SeedSequence(seed)


def substream(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Generator for the stream addressed by ``keys`` under ``seed``."""
    base = seed_sequence(seed)
    ss = np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed_sequence(seed))
