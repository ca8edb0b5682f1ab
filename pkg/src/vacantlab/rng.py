"""Reproducible random streams.

Every replica of every experiment draws from its own Philox stream keyed by
``(master_seed, *path)``, so results do not depend on scheduling order or on
the number of worker threads.
"""

from __future__ import annotations

import numpy as np


def stream(master_seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def replica_streams(master_seed: int, replicas: int, *path: int) -> list[np.random.Generator]:
    return [stream(master_seed, *path, r) for r in range(replicas)]


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed, a Generator, or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return stream(0)
    return stream(int(rng))
