"""Deterministic seed derivation.

All randomness in a run flows from one 64-bit master seed. Child streams are
derived with ``numpy.random.SeedSequence(master, spawn_key=path)`` where the
path starts with one of the purpose constants below, optionally followed by
further indices (e.g. the epoch number). This keeps every component
reproducible in isolation: the dataset generator, parameter init, per-epoch
shuffling, augmentation draws and stochastic-depth masks each own a stream
that does not shift when an unrelated component consumes more randomness.
"""

from __future__ import annotations

import numpy as np

# Purpose constants: first element of the spawn key.
DATA = 0
INIT = 1
SHUFFLE = 2
AUGMENT = 3
STOCHASTIC_DEPTH = 4
INPUTS = 5


def child_sequence(master_seed: int, *path: int) -> np.random.SeedSequence:
    """Seed sequence for one purpose (and optional sub-indices such as epoch)."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(path))


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Fresh generator for the given purpose path."""
    return np.random.default_rng(child_sequence(master_seed, *path))
