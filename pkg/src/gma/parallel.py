"""Order-preserving map that optionally fans out to worker processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("GMA_JOBS", "1")))
    except ValueError:
        return 1


def pmap(fn: Callable, items: Iterable, jobs: Optional[int] = None) -> list:
    """``list(map(fn, items))``, run on ``jobs`` processes when ``jobs > 1``.

    Results come back in input order, and every work item carries its own
    seed, so the output does not depend on ``jobs``.
    """
    items = list(items)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=chunk))
