"""Seeded random streams.

Every stochastic routine takes an explicit ``numpy.random.Generator``.  The
bit generator is Philox-4x64 (a counter-based generator, 10 rounds, the
Random123 multiplier/Weyl constants baked into numpy) keyed by a
``SeedSequence`` built from ``(seed, *path)``.  Distinct paths give
statistically independent streams, so trial ``i`` of an experiment uses
``stream(seed, "trial", i)`` regardless of execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode())
    return int(x) & 0xFFFFFFFFFFFFFFFF


def stream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence([_word(seed), *(_word(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))
