"""Seeded, splittable random streams.

Every stream is a numpy ``Generator`` over the Philox4x64-10 counter-based
bit generator, keyed by a ``SeedSequence(seed, spawn_key=path)``. A stream is
identified by its root seed plus an integer path such as
``(element_index, purpose)``, so independent tasks can draw from
non-overlapping streams without sharing state, and a given (seed, path)
always reproduces the same numbers on every platform numpy supports.
"""

from __future__ import annotations

import os

import numpy as np

SEED_ENV = "LRPDMAP_SEED"
DEFAULT_SEED = 0

# stream purposes, used as the last spawn-key component
INIT = 1
SHUFFLE = 2
SPLIT = 3
SAMPLE = 4
NOISE = 5
MAP = 6


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, DEFAULT_SEED))


def stream(seed: int, *path: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in path):
        raise ValueError("seed and stream path must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in path))
    return np.random.Generator(np.random.Philox(ss))
