"""Deterministic random-number plumbing.

Every randomized stage of the library draws from its own counter-based
generator, keyed by a global seed plus a path of names (e.g.
``("attack", "sample", 17)``).  Keys are derived with BLAKE2, so the same
seed and path always produce the same stream on every platform, and
streams for different paths are statistically independent.  Batch-level
parallelism therefore cannot perturb per-sample determinism.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["split_seed", "make_rng"]


def split_seed(seed: int, *path: object) -> int:
    """Derive a 64-bit child seed from ``seed`` and a path of names."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *path: object) -> np.random.Generator:
    """Counter-based generator for the given seed and derivation path."""
    return np.random.Generator(np.random.Philox(key=split_seed(seed, *path)))
