"""Seeded, splittable random streams.

All randomness in the package flows through numpy Generators created here,
so a single integer seed pins every sample drawn anywhere downstream.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """A generator whose sample sequence is fully determined by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent child streams; the same seed yields the same children."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
