"""Deterministic random-stream derivation.

Every stochastic component draws from a generator derived from the master
seed plus a structural key (domain tag, then indices such as iteration,
gene, tree or restart).  Streams are therefore independent of scheduling:
parallel and sequential execution consume identical randomness.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams from distinct subsystems disjoint even when the
# same master seed is reused across pipeline stages.
DOMAIN_SIMULATE = 0
DOMAIN_FOREST = 1
DOMAIN_KMEANS = 2


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))))
