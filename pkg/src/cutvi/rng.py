"""Named random streams and an order-preserving parallel map.

Every stream is derived from one master seed and a name such as ``fit``,
``check`` with replication index ``i``, or ``oracle`` with chain ``j``, so
runs are reproducible regardless of how work is scheduled.
"""

from __future__ import annotations

import multiprocessing as mp
import zlib

import numpy as np


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


_TASK = None


def _call(i):
    return _TASK(i)


def parallel_map(fn, n: int, n_jobs: int = 1) -> list:
    """``[fn(0), ..., fn(n - 1)]``, computed in ``n_jobs`` forked workers.

    Results come back in index order, so the output does not depend on
    ``n_jobs``.  ``fn`` may be a closure; workers inherit it by forking.
    """
    global _TASK
    if n_jobs <= 1 or n <= 1 or "fork" not in mp.get_all_start_methods():
        return [fn(i) for i in range(n)]
    _TASK = fn
    try:
        with mp.get_context("fork").Pool(min(n_jobs, n)) as pool:
            return pool.map(_call, range(n), chunksize=max(1, n // (4 * n_jobs)))
    finally:
        _TASK = None
