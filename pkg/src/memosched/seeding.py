"""Hierarchical random streams derived from one 64-bit experiment seed."""
from __future__ import annotations

import numpy as np

SEARCH_STREAM = 0
DATA_STREAM = 1
NOISE_STREAM = 2
TRAIN_STREAM = 3


def derive_seed(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(p) for p in path))


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream at ``path`` below ``seed``.

    Streams at distinct paths are independent, so adding workers or
    candidates never perturbs another stream.
    """
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *path)))


def child_seed(seed: int, *path: int) -> int:
    """A plain 63-bit integer seed for the stream at ``path``, for configs and manifests."""
    return int(derive_seed(seed, *path).generate_state(1, np.uint64)[0] >> np.uint64(1))
