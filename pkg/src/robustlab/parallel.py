"""Ordered thread-pool map over fixed-size shards.

Shard boundaries never depend on the thread count, so any computation whose
result is a function of its shard is bitwise reproducible at every ``threads``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    return os.cpu_count() or 1


def shards(n: int, size: int) -> list[range]:
    if size < 1:
        raise ValueError("shard size must be >= 1")
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    items: Sequence[T] = list(items)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
