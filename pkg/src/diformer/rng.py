"""Seeded randomness with named sub-streams.

Every source of randomness in the package (parameter init, dropout,
direction sampling, mask sampling, data generation, batch shuffling)
draws from a generator obtained here, so a run is fully determined by
one integer seed. Sub-streams are derived by folding the stream name
into a ``numpy.random.SeedSequence`` together with the root seed; the
underlying bit generator is PCG64, which numpy documents and keeps
stable across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name).

    The same pair always yields the same stream; distinct names yield
    statistically independent streams.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *words])))
