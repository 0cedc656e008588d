"""Deterministic chunking of Monte-Carlo work over independent seed streams.

Paths are split into fixed-size chunks; chunk ``c`` draws from the ``c``-th
child of ``SeedSequence(seed)``. The chunk layout never depends on the thread
count, so results are bit-identical whatever ``threads`` is.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_PATHS = 5000
THREADS_ENV = "SWITCHLQ_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunk_plan(n_paths: int, seed: int, chunk: int = CHUNK_PATHS):
    sizes = [chunk] * (n_paths // chunk)
    if n_paths % chunk:
        sizes.append(n_paths % chunk)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    return list(zip(sizes, children))


def map_chunks(fn, n_paths: int, seed: int, threads: int | None = None, chunk: int = CHUNK_PATHS):
    """Run ``fn(size, seed_sequence)`` per chunk, returning results in chunk order."""
    plan = chunk_plan(n_paths, seed, chunk)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(plan) == 1:
        return [fn(size, ss) for size, ss in plan]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda item: fn(*item), plan))


def mean_and_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, float)
    n = samples.size
    if n < 2:
        return float(samples.mean()), 0.0
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n))
