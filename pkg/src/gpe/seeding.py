"""Deterministic RNG derivation.

All randomness in a run flows from one 64-bit root seed. Each consumer asks
for a child generator named by a tag path; the path is hashed (sha256, not
Python's salted hash) into a spawn key, so adding or reordering consumers
never perturbs the streams of the others.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def child_rng(root_seed: int, *tags: object) -> np.random.Generator:
    """Return an independent generator for (root_seed, tag path)."""
    path = "/".join(str(t) for t in tags)
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    # four 32-bit words make the spawn key; collisions would need a sha256 break
    key = tuple(int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4))
    seq = np.random.SeedSequence(entropy=root_seed & _MASK64, spawn_key=key)
    return np.random.default_rng(seq)
