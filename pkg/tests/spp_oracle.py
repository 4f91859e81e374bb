"""Brute-force references for the sequence-pipeline schedule."""
from __future__ import annotations

import itertools

import numpy as np


def all_tables(n_chunks: int, n_stages: int, values=(1, 2, 3)) -> np.ndarray:
    """Every integer stage-time table of the given shape, as (M, n, k)."""
    vals = np.asarray(values, dtype=np.int64)
    m = n_chunks * n_stages
    # mixed-radix digits, most significant first: same order as itertools.product
    idx = np.arange(len(vals) ** m, dtype=np.int64)[:, None]
    digits = idx // len(vals) ** np.arange(m - 1, -1, -1, dtype=np.int64) % len(vals)
    return vals[digits].reshape(-1, n_chunks, n_stages)


def tick_makespans(tables: np.ndarray, comm: int = 0) -> np.ndarray:
    """Advance a unit clock: at each tick every idle stage starts the next
    chunk (in order) whose previous stage output has arrived."""
    M, n, k = tables.shape
    end = np.full((M, n, k), np.iinfo(np.int64).max // 4, dtype=np.int64)
    free = np.zeros((M, k), dtype=np.int64)
    nxt = np.zeros((M, k), dtype=np.int64)
    rows = np.arange(M)
    horizon = int(tables.sum(axis=(1, 2)).max()) + comm * (n + k) + 2
    for t in range(horizon):
        for s in range(k):
            i = nxt[:, s]
            valid = i < n
            ic = np.minimum(i, n - 1)
            ready = np.zeros(M, dtype=np.int64) if s == 0 else end[rows, ic, s - 1] + comm
            go = valid & (free[:, s] <= t) & (ready <= t)
            finish = t + tables[rows, ic, s]
            end[rows[go], ic[go], s] = finish[go]
            free[go, s] = finish[go]
            nxt[go, s] += 1
        if (nxt[:, -1] == n).all():
            break
    return end[:, n - 1, k - 1]


def enumerate_orders(table, comm: float = 0.0) -> set[float]:
    """Makespans over every dispatch order that respects the pipeline rules.

    A task (chunk i, stage s) may be dispatched once (i, s-1) and (i-1, s)
    have been; each dispatched task starts as early as its stage and input
    allow.  The set has one element when the schedule is order-independent.
    """
    n, k = len(table), len(table[0])
    results = set()

    def rec(done: dict, free: list):
        if len(done) == n * k:
            results.add(done[(n - 1, k - 1)])
            return
        for i in range(n):
            for s in range(k):
                if (i, s) in done:
                    continue
                if s and (i, s - 1) not in done:
                    continue
                if i and (i - 1, s) not in done:
                    continue
                ready = done[(i, s - 1)] + comm if s else 0.0
                start = max(free[s], ready)
                done[(i, s)] = start + table[i][s]
                saved = free[s]
                free[s] = done[(i, s)]
                rec(done, free)
                free[s] = saved
                del done[(i, s)]

    rec({}, [0.0] * k)
    return results
