"""Hierarchical seed derivation.

Every RNG stream in an experiment is keyed by a path of names below one
64-bit root seed, e.g. ``derive_seed(root, "data", "task", 2)``. The
derivation hashes the canonical text of the path with SHA-256, so it is
stable across processes and Python versions (unlike ``hash()``).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *path: object) -> int:
    text = "/".join([str(int(root) & _MASK64), *(str(p) for p in path)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))
