"""Seeded random-number sources.

Every random draw in the package comes from a numpy ``Generator`` backed by
the PCG64 bit generator, seeded through ``numpy.random.SeedSequence``.  PCG64
is a published, stable algorithm, so a run is reproducible from its seed on
any platform with the same numpy version.

Derived generators are keyed by small integer tuples (epoch, sample index,
role) instead of consuming state from a shared stream.  This keeps sample
order, checkpoint resume, and parallel batch assembly from reordering
randomness.
"""

from __future__ import annotations

import numpy as np

# Role tags for derived streams; values are arbitrary but frozen.
ROLE_SHUFFLE = 1
ROLE_WINDOW = 2
ROLE_FRAGMENT = 3
ROLE_DROPOUT = 4
ROLE_INIT = 5
ROLE_VAL_SPLIT = 6


def generator(seed: int) -> np.random.Generator:
    """A fresh PCG64 generator for the given seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derived(seed: int, *key: int) -> np.random.Generator:
    """A PCG64 generator derived from a base seed and an integer key path.

    The same (seed, key) pair always yields the same stream, independent of
    how many other streams were derived before it.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
