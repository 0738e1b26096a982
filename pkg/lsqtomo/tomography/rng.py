"""Seed derivation: every independent stream gets its own SeedSequence child."""

from __future__ import annotations

import numpy as np

Seed = int | np.random.SeedSequence


def derive_sequence(seed: Seed, *key: int) -> np.random.SeedSequence:
    """Child sequence for ``key``; identical for identical (seed, key), independent of call order."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.SeedSequence(int(seed), spawn_key=key)


def derive_rng(seed: Seed, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_sequence(seed, *key))
