"""Optional thread-pool mapping, capped by the EMSCOPE_THREADS variable.

Work items always carry their own derived seed, so the result list is
identical for any worker count; only wall time changes.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Worker count from EMSCOPE_THREADS: unset -> 1, 0 -> all cores."""
    raw = os.environ.get("EMSCOPE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def par_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map preserving input order; threaded when EMSCOPE_THREADS allows."""
    seq: Sequence[T] = list(items)
    workers = thread_count()
    if workers <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seq))
