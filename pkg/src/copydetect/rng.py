"""Seed splitting.

Every random stream is a PCG64 generator seeded by
``numpy.random.SeedSequence([seed, stream_tag, *keys])``. Stream tags are fixed
small integers listed in ``STREAMS``; keys are image ids, epoch numbers and the
like. Two streams with different keys are statistically independent, and a
stream depends on nothing but its key tuple, so generation order never matters.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "scene": 1,
    "crop": 2,
    "edit": 3,
    "hardneg": 4,
    "texture": 5,
    "dataset": 6,
    "init": 7,
    "batch": 8,
    "query": 9,
    "heldout": 10,
}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed), STREAMS[name], *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """A 63-bit child seed, for APIs that take a plain integer."""
    return int(stream(seed, name, *keys).integers(0, 2**63 - 1))
