"""Deterministic RNG namespacing for mixed string/int seed parts."""

import hashlib

import numpy as np


def seed_sequence(*parts) -> np.random.SeedSequence:
    """SeedSequence over (str|int) parts; strings hash to stable ints."""
    entropy = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(int(part))
    return np.random.SeedSequence(entropy)


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(*parts))
