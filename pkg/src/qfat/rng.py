"""Seeded random-stream management.

All randomness in the package flows from one root seed through named
substreams ("data", "init", "dropout", "sampling", ...) so that individual
components can be re-seeded or varied independently without perturbing the
others.  Substream derivation is a pure function of (seed, name[, index]),
never of execution order, which is what makes thread-parallel evaluation
reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    # Stable across platforms and Python processes (unlike hash()).
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def substream(seed: int, name: str, index: int | None = None) -> np.random.Generator:
    """Return a Generator for the named substream of a root seed.

    ``index`` derives a further per-item stream (e.g. one per episode) that
    is independent of how many items run or in which order.
    """
    entropy = [int(seed), _name_key(name)]
    if index is not None:
        entropy.append(int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
