"""Shared small helpers (worker-pool sizing, deterministic fan-out)."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["worker_count", "thread_map"]

THREADS_ENV = "FLASHBLOCK_THREADS"


def worker_count(requested: int | None = None) -> int:
    """Worker pool size: explicit request, else FLASHBLOCK_THREADS, else CPUs."""
    if requested is not None:
        return max(1, requested)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def thread_map(fn, items, workers: int | None = None) -> list:
    """Map ``fn`` over ``items`` with a bounded thread pool.

    Results come back in input order regardless of scheduling, so parallel
    sweeps stay deterministic.  Tasks must be independent (no shared mutable
    state) per the caller's contract.
    """
    items = list(items)
    n = min(worker_count(workers), max(1, len(items)))
    if n == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
