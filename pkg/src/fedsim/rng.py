"""Derivation of independent, reproducible random streams.

Every source of randomness in the simulator is keyed by a tuple of
non-negative integers (base seed plus purpose/round/client tags) fed
through ``numpy.random.SeedSequence``.  Distinct key tuples yield
well-separated streams, and the same tuple always yields the same
stream regardless of call order, thread count, or platform.
"""
from __future__ import annotations

import numpy as np


def _as_key_tuple(keys: tuple) -> list[int]:
    if not keys:
        raise ValueError("at least one seed key is required")
    out = []
    for k in keys:
        ik = int(k)
        if ik != k or ik < 0:
            raise ValueError(f"seed keys must be non-negative integers, got {k!r}")
        out.append(ik)
    return out


def seeded_rng(*keys: int) -> np.random.Generator:
    """Return a Generator determined purely by the integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence(_as_key_tuple(keys)))


def spawn_seed(*keys: int) -> int:
    """Collapse a key tuple into a single derived seed (uint64 range)."""
    state = np.random.SeedSequence(_as_key_tuple(keys)).generate_state(1, np.uint64)
    return int(state[0])
