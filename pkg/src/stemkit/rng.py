"""Deterministic random number generation for reproducible synthesis.

All samplers in this package take an explicit generator handle; there is no
global RNG. Streams are counter-based (Philox), so the same seed produces the
same sample sequence on every platform, and per-sample child streams can be
derived without consuming the parent stream.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Generator for a top-level seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def child_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for item `index` of a run seeded with `seed`.

    Children of the same seed are mutually independent, so items may be
    generated in any order (or in parallel) without changing their bytes.
    """
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(seq))
