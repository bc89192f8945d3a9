"""Labeled seed derivation.

Every random stream in the package is derived from a single root seed
plus a string label.  Adding a new labeled stream never perturbs the
existing ones, and two streams with different labels are statistically
independent.
"""

import hashlib

import numpy as np


def derive_seed_sequence(root_seed: int, label: str) -> np.random.SeedSequence:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.SeedSequence(entropy=[int(root_seed) & 0xFFFFFFFFFFFFFFFF, *words])


def derive_rng(root_seed: int, label: str) -> np.random.Generator:
    """Deterministic generator for (root_seed, label)."""
    return np.random.default_rng(derive_seed_sequence(root_seed, label))
