"""Counter-based random streams.

Every task draws from a Philox generator keyed by ``(master_seed, *key)``, so
results do not depend on how tasks are spread over workers.
"""

from __future__ import annotations

import numpy as np


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the task identified by ``key``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def as_generator(rng) -> np.random.Generator:
    """Accept a generator or an integer seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(int(rng))
