"""Deterministic RNG stream derivation from (seed, tags)."""

import hashlib

import numpy as np


def stable_tag(name: str) -> int:
    """Stable 64-bit tag for a string, independent of PYTHONHASHSEED."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def rng_from(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by the seed plus integer or string tags."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        entropy.append(stable_tag(t) if isinstance(t, str) else int(t) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))
