"""Reproducible random streams.

Every unit of random work (one particle at one stage for one purpose) gets its
own generator derived from the master seed, so results do not depend on the
order or the number of workers that process the units.
"""
from __future__ import annotations

import numpy as np

INIT = 0
MUTATE = 1
RESAMPLE = 2
CHAIN = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))
