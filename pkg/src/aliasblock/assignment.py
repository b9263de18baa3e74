"""Minimum-cost perfect assignment (Hungarian method with potentials).

Among all optimal permutations the lexicographically smallest one is
returned, so results do not depend on incidental pivot order.
"""

from __future__ import annotations

import numpy as np

TIGHT_RTOL = 1e-9


def _hungarian(C):
    """Shortest augmenting path version; returns (row->col, u, v)."""
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = C
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            upd = free & (cur < minv)
            minv[upd] = cur[upd]
            way[upd] = j0
            cand = np.flatnonzero(free)
            j1 = int(cand[np.argmin(minv[cand])])
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.zeros(n, dtype=int)
    perm[p[1:] - 1] = np.arange(n)
    return perm, u[1:], v[1:]


def _lexicographic(perm, tight):
    """Smallest permutation in lexicographic order using tight edges only,
    starting from the perfect matching ``perm``."""
    n = perm.shape[0]
    perm = perm.copy()
    owner = np.empty(n, dtype=int)
    owner[perm] = np.arange(n)
    for i in range(n):
        cols = np.flatnonzero(tight[i, :perm[i]])
        if cols.size == 0:
            continue
        # rows > i that can hand their column on along tight edges until
        # column perm[i] is taken; next_col[r] is the column r moves to
        free_rows = np.zeros(n, dtype=bool)
        free_rows[i + 1:] = True
        reach = np.zeros(n, dtype=bool)
        next_col = np.full(n, -1)
        in_set = np.zeros(n, dtype=bool)
        in_set[perm[i]] = True
        frontier = [perm[i]]
        while frontier:
            new_cols = []
            for c in frontier:
                rows = np.flatnonzero(tight[:, c] & free_rows & ~reach)
                for r in rows:
                    reach[r] = True
                    next_col[r] = c
                    mc = perm[r]
                    if not in_set[mc]:
                        in_set[mc] = True
                        new_cols.append(mc)
            frontier = new_cols
        ok = reach[owner[cols]]
        if not np.any(ok):
            continue
        j = int(cols[np.argmax(ok)])
        old = perm[i]
        r = owner[j]
        perm[i] = j
        owner[j] = i
        while True:
            c = next_col[r]
            perm[r] = c
            prev_owner = owner[c]
            owner[c] = r
            if c == old:
                break
            r = prev_owner
    return perm


def optimal_assignment(cost) -> np.ndarray:
    """Exact minimum-cost perfect matching of an n x n cost matrix.

    Parameters
    ----------
    cost : (n, n) array of finite reals

    Returns
    -------
    perm : (n,) int array, row i is matched to column ``perm[i]``.
        Ties between optimal matchings go to the lexicographically
        smallest ``perm``.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    n = C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    perm, u, v = _hungarian(C)
    tol = TIGHT_RTOL * max(1.0, np.abs(C).max())
    tight = np.abs(C - u[:, None] - v[None, :]) <= tol
    tight[np.arange(n), perm] = True
    return _lexicographic(perm, tight)


def assignment_cost(cost, perm) -> float:
    C = np.asarray(cost, dtype=float)
    return float(C[np.arange(C.shape[0]), perm].sum())
