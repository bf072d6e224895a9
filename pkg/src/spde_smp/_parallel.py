"""Worker pool and order-fixed reductions.

Work is always cut into chunks whose boundaries depend only on the problem
size, never on the worker count, and reductions run over a fixed pairwise
tree.  Results are therefore bit-identical for any ``SPDE_SMP_THREADS``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 2048
ENV_THREADS = "SPDE_SMP_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 0
        if n >= 1:
            return n
    return os.cpu_count() or 1


def chunk_bounds(n: int, chunk: int = CHUNK) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def chunked_map(fn, n: int, chunk: int = CHUNK) -> list:
    """Apply ``fn(lo, hi)`` to every chunk of ``range(n)``; results in chunk order."""
    bounds = chunk_bounds(n, chunk)
    workers = min(worker_count(), len(bounds))
    if workers <= 1:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


def tree_sum(a: np.ndarray) -> np.ndarray:
    """Pairwise sum over axis 0 in index order."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    while a.shape[0] > 1:
        if a.shape[0] % 2:
            head = a[:-1:2] + a[1::2]
            a = np.concatenate([head, a[-1:]], axis=0)
        else:
            a = a[0::2] + a[1::2]
    return a[0]


def tree_mean(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return tree_sum(a) / a.shape[0]


def mean_and_stderr(values: np.ndarray) -> tuple[float, float]:
    """Ensemble mean and its standard error for a 1-D array of per-path values."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    mean = float(tree_mean(values))
    if n < 2:
        return mean, 0.0
    var = float(tree_sum((values - mean) ** 2)) / (n - 1)
    return mean, float(np.sqrt(var / n))
