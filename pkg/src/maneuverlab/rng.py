"""Named, reproducible random substreams derived from a single run seed.

Every stochastic component (tuple sampling, weight init, dropout,
reparameterization noise, ...) draws from its own substream so that
toggling one feature never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator keyed by (seed, name), stable across runs and platforms."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
