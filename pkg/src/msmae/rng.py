"""Stateless derivation of independent random streams.

Every random draw in the system comes from a PCG64 generator seeded by
SeedSequence([seed, role, *indices]). Nothing ever serializes generator
state: the stream for (seed, role, indices) is reconstructible from those
integers alone, which is what makes checkpoint resume bit-exact.

The role table is part of the reproducibility contract; changing a code
renumbers every stream.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

ROLES = {
    "shuffle": 1,   # per-epoch dataset permutation
    "augment": 2,   # per (epoch, sample) augmentation transform
    "mask": 3,      # per (epoch, sample) visibility draw
    "episode": 4,   # per few-shot run
    "resample": 5,  # per-record point count adjustment
    "data": 6,      # per (class, index) synthetic shape
}


def derive_rng(seed, role, *indices):
    """Independent PCG64 stream for (seed, role, indices...)."""
    if role not in ROLES:
        raise ContractError(f"unknown rng role {role!r}")
    entropy = [int(seed) & 0xFFFFFFFF, ROLES[role]] + [int(i) for i in indices]
    return np.random.default_rng(np.random.SeedSequence(entropy))
