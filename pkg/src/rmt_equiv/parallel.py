"""Seed-deterministic Monte-Carlo helpers.

Trials run in worker threads but results are consumed in trial order, so
every reduction is independent of the thread count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator

import numpy as np


def imap_trials(fn: Callable[[int], object], trials: int, threads: int = 1,
                chunk: int | None = None) -> Iterator:
    """Yield ``fn(0), fn(1), ...`` in order, evaluated on ``threads`` workers."""
    if threads <= 1:
        for t in range(trials):
            yield fn(t)
        return
    chunk = chunk or 4 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for start in range(0, trials, chunk):
            yield from pool.map(fn, range(start, min(start + chunk, trials)))


class KahanSum:
    """Compensated running sum of scalars or arrays."""

    def __init__(self):
        self.total = None
        self._c = None
        self.count = 0

    def add(self, x) -> None:
        x = np.asarray(x)
        self.count += 1
        if self.total is None:
            self.total = x.astype(np.result_type(x, float), copy=True)
            self._c = np.zeros_like(self.total)
            return
        y = x - self._c
        t = self.total + y
        self._c = (t - self.total) - y
        self.total = t

    def mean(self):
        return None if self.total is None else self.total / self.count
