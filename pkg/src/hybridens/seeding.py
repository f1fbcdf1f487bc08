"""Deterministic seed derivation.

Every stochastic stage of a run draws from a generator seeded by
``subseed(run_seed, *tags)``.  The tags are stable strings naming the stage
(e.g. ``("train", "convA")`` or ``("oof", "convB", 3)``), so re-running with
the same run seed reproduces every stream bit for bit, and stages can run in
any order without perturbing one another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def subseed(seed: int, *tags: object) -> int:
    """Derive a 63-bit child seed from ``seed`` and a tuple of stage tags."""
    key = ":".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(seed: int, *tags: object) -> np.random.Generator:
    """Generator seeded by :func:`subseed` of the given stage tags."""
    return np.random.default_rng(subseed(seed, *tags))
