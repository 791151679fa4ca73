"""Deterministic seed derivation and counter-based generators.

Every random draw in the framework comes from a Philox generator keyed by a
64-bit seed derived from ``(experiment seed, stream, *coordinates)``.  The
derivation is independent of which process performs the draw, so replaying a
task on another runner reproduces it bit for bit.
"""

from __future__ import annotations

import enum

import numpy as np


class Stream(enum.IntEnum):
    PROPAGATE = 1
    PERTURB = 2
    RESAMPLE = 3
    OBS_NOISE = 4
    TRUTH = 5
    INITIAL = 6
    EVICTION = 7
    INSTANCE = 8


def derive_seed(root: int, stream: int, *coords: int) -> int:
    """Return a 64-bit seed that is a pure function of its arguments."""
    entropy = [int(root) & 0xFFFFFFFFFFFFFFFF, int(stream), *(int(c) for c in coords)]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def task_seed(root: int, cycle: int, task_index: int) -> int:
    return derive_seed(root, Stream.PROPAGATE, cycle, task_index)


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
