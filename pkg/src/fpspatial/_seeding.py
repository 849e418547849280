"""Stateless seed derivation.

Every random stream is ``SeedSequence(master, spawn_key=path)`` for a fixed
tuple ``path``, so streams never depend on call order.
"""
from __future__ import annotations

import numpy as np

FROZEN = 0
REPLICATION = 1
ESTIMAND = 2


def as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child(seed, *keys: int) -> np.random.SeedSequence:
    ss = as_seedseq(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(keys))


def rng(seed, *keys: int) -> np.random.Generator:
    return np.random.default_rng(child(seed, *keys))
