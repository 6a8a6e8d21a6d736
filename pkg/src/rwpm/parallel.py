"""Process pool for independent per-environment tasks.

Task ``i`` must draw only from its own counter-based stream, so the output
does not depend on the worker count.  Workers are forked, which lets them
inherit lattice-law tables built by the parent.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor

_TASK = None


def _run(i: int):
    return _TASK(i)


def map_tasks(fn, n: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(n-1)]``, evaluated on ``workers`` forked processes."""
    global _TASK
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    _TASK = fn
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_run, range(n), chunksize=max(1, n // (4 * workers))))
    finally:
        _TASK = None
