"""Exact linear sum assignment (Hungarian method with row/column potentials).

O(n^3) shortest augmenting path formulation; the inner scan over columns is
vectorised with numpy.
"""

from __future__ import annotations

import numpy as np

from .core import DimensionError, VnmError


def hungarian(cost, maximize: bool = False) -> np.ndarray:
    """Return ``assign`` with ``assign[row] = col`` optimising ``sum cost[row, assign[row]]``."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise VnmError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if maximize:
        c = -c
    # 1-based potentials; column 0 is the virtual start column.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    assign[owner[1:] - 1] = np.arange(n)
    return assign


def assignment_value(cost, assign: np.ndarray) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(c[np.arange(c.shape[0]), assign].sum())
