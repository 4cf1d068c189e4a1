"""Deterministic random streams.

Every random draw in this package flows through :func:`stream`, which maps a
64-bit seed plus an integer address path to an independent counter-based
generator (Philox keyed through ``SeedSequence``).  Batch samplers carve
their output into fixed blocks of :data:`BLOCK` samples with one stream per
block, so sample ``i`` of a call is a function of ``(seed, i)`` alone --
never of the requested batch size or of how work was scheduled across
workers.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

#: Samples per generator block in batch samplers.  Part of the determinism
#: contract: changing it changes which draws a given (seed, index) sees.
BLOCK = 1024

# Address-path domains, one per drawing site, so a seed shared between two
# different operations never replays the same underlying stream.
DOMAIN_MANIFOLD = 1
DOMAIN_FORWARD = 2
DOMAIN_GAUSS_INIT = 3
DOMAIN_MEMORIZED = 4
DOMAIN_SPLIT = 5
DOMAIN_EMBED = 6
DOMAIN_EXP_SAMPLER = 7


def stream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator addressed by ``(seed, *path)``.

    Distinct addresses give statistically independent streams, and the
    mapping is stable across processes, platforms, and worker schedules.
    """
    entropy = tuple(int(p) & _MASK64 for p in (seed, *path))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for ``(seed, *path)``, for handing to another component."""
    entropy = tuple(int(p) & _MASK64 for p in (seed, *path))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
