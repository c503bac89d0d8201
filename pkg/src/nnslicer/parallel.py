"""Process-pool helper.  Library code never spawns its own concurrency; the
caller passes a worker count (the CLI owns the pool size).  Shard boundaries
are fixed by the caller, so results are identical for any worker count."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers() -> int:
    env = os.environ.get("NNSLICER_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _call(job):
    fn, args = job
    return fn(*args)


def map_shards(fn, arg_tuples, workers: int = 1):
    """Apply fn(*args) to each tuple; results come back in submission order."""
    arg_tuples = list(arg_tuples)
    if workers <= 1 or len(arg_tuples) <= 1:
        return [fn(*args) for args in arg_tuples]
    ctx_kwargs = {}
    if hasattr(os, "fork"):
        import multiprocessing

        ctx_kwargs["mp_context"] = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, **ctx_kwargs) as pool:
        return list(pool.map(_call, [(fn, args) for args in arg_tuples]))
