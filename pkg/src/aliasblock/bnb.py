"""Branch and bound for linear programs with some 0-1 variables."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .simplex import linprog

INT_TOL = 1e-6


@dataclass
class MIPResult:
    status: str  # "optimal", "infeasible" or "node_limit"
    x: Optional[np.ndarray]
    fun: Optional[float]
    bound: float
    nodes: int

    @property
    def gap(self) -> float:
        if self.fun is None:
            return float("inf") if self.status == "node_limit" else 0.0
        return max(0.0, self.fun - self.bound)


def solve_binary_program(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None,
                         binary=None, ub=None, fixed_zero=None,
                         node_limit: int = 200000, first_feasible: bool = False):
    """Minimize ``c.x`` with the variables flagged in ``binary`` restricted
    to {0, 1}; the others are continuous on ``[0, ub]``.

    Nodes are explored best bound first with first-in-first-out order
    among equal bounds.  With ``first_feasible`` the search is depth first
    and stops at the first integer point, which suits pure feasibility
    questions where every node has the same bound.  The branching variable
    is the most fractional binary, lowest index on ties.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    binary = np.ones(n, dtype=bool) if binary is None else np.asarray(binary, dtype=bool)
    upper = np.ones(n) if ub is None else np.asarray(ub, dtype=float).copy()
    upper[binary] = 1.0
    lower = np.zeros(n)
    if fixed_zero is not None:
        upper[np.asarray(fixed_zero, dtype=bool)] = 0.0

    best_x, best_val = None, np.inf
    seq = 0
    heap = [(0.0, 0, lower, upper, 0)]
    nodes = 0
    open_bound = -np.inf
    while heap:
        if nodes >= node_limit:
            open_bound = min(item[0] for item in heap)
            break
        key, _, lo, hi, depth = heapq.heappop(heap)
        bound_here = -key if first_feasible else key
        if not first_feasible and bound_here >= best_val - 1e-9:
            continue
        nodes += 1
        res = linprog(c, A_ub, b_ub, A_eq, b_eq, lo, hi)
        if res.status != "optimal":
            if res.status == "unbounded":
                raise ValueError("relaxation is unbounded")
            continue
        if res.fun >= best_val - 1e-9:
            continue
        xb = res.x[binary]
        frac = np.abs(xb - np.round(xb))
        if np.all(frac <= INT_TOL):
            x = res.x.copy()
            x[binary] = np.round(xb)
            best_x, best_val = x, float(c @ x)
            if first_feasible:
                return MIPResult("optimal", best_x, best_val, best_val, nodes)
            continue
        bin_idx = np.flatnonzero(binary)
        score = np.abs(xb - 0.5)
        j = int(bin_idx[np.argmin(score)])
        for value in (1.0, 0.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = hi2[j] = value
            seq += 1
            key2 = -(depth + 1) if first_feasible else res.fun
            heapq.heappush(heap, (key2, seq, lo2, hi2, depth + 1))
    if heap and nodes >= node_limit:
        bound = best_val if first_feasible and best_x is not None else open_bound
        if first_feasible:
            bound = -np.inf
        return MIPResult("node_limit", best_x, None if best_x is None else best_val,
                         bound, nodes)
    if best_x is None:
        return MIPResult("infeasible", None, None, np.inf, nodes)
    return MIPResult("optimal", best_x, best_val, best_val, nodes)
