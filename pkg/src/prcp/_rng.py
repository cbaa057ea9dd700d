"""Seed derivation helpers.

All randomness in the package flows from integer seeds. Sub-streams are
derived with ``SeedSequence`` spawn keys so that a stream depends only on
``(seed, *keys)`` and never on call order or thread scheduling.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.Generator | None


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 63-bit integer seed for the sub-stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    state = ss.generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
