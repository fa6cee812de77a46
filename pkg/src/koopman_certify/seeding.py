"""Deterministic fan-out of a master seed into independent sub-seeds."""

import numpy as np


def subseed(master: int, *keys: int) -> int:
    """64-bit seed for the cell identified by ``keys`` under ``master``.

    Uses numpy's SeedSequence hashing, so sub-seeds of different key tuples
    are statistically independent and never depend on evaluation order.
    """
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng(master: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(subseed(master, *keys))
