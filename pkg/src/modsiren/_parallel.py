"""Thread-count-independent parallel execution.

Torch's own intra-op threading splits reductions by thread count, which
changes floating-point results.  Kernels therefore always run with one torch
thread, and parallelism comes from evaluating fixed-size chunks of signals
concurrently.  Chunk boundaries never depend on the worker count and results
are combined in chunk order, so any worker count gives bitwise equal output.
"""
from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import torch

CHUNK = 4
"""Signals per work unit."""

_workers = 1


def set_threads(n: int) -> None:
    """Number of worker threads used for chunked evaluation."""
    global _workers
    n = int(n)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _workers = n


def get_threads() -> int:
    return _workers


@contextmanager
def serial_torch():
    """Run torch ops in the calling thread with a single intra-op thread."""
    prev = torch.get_num_threads()
    if prev != 1:
        torch.set_num_threads(1)
    try:
        yield
    finally:
        if prev != 1:
            torch.set_num_threads(prev)


def serial(fn):
    """Decorator form of :func:`serial_torch`."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with serial_torch():
            return fn(*args, **kwargs)

    return wrapper


def chunks(n: int) -> list:
    """Consecutive ``(start, stop)`` bounds covering ``range(n)``."""
    return [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


def map_ordered(fn, items) -> list:
    """``[fn(x) for x in items]``, evaluated on the worker pool."""
    items = list(items)

    def run(item):
        with serial_torch():
            return fn(item)

    with serial_torch():
        if _workers == 1 or len(items) <= 1:
            return [run(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(_workers, len(items))) as pool:
            return list(pool.map(run, items))
