"""Dense two-phase primal simplex with bounded variables.

Solves ``min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lb <= x <= ub``
where every lower bound is finite.  The tableau is kept in full; that is
fine for the problem sizes here (tens of rows, up to a few thousand
columns) and keeps the method easy to audit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

PIVOT_TOL = 1e-9
OPT_TOL = 1e-9
FEAS_TOL = 1e-7


@dataclass
class LPResult:
    status: str  # "optimal", "infeasible", "unbounded" or "iteration_limit"
    x: Optional[np.ndarray]
    fun: Optional[float]
    nit: int

    @property
    def success(self) -> bool:
        return self.status == "optimal"


class _Tableau:
    def __init__(self, A, b, upper):
        # A x = b with 0 <= x <= upper; b >= 0 is arranged by the caller
        self.m, self.n = A.shape
        self.T = A.copy()
        self.upper = upper
        self.x = np.zeros(self.n)
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.basis = np.full(self.m, -1, dtype=int)
        self.b = b
        self.nit = 0

    def pivot(self, r, q, d):
        piv = self.T[r, q]
        self.T[r] /= piv
        col = self.T[:, q].copy()
        col[r] = 0.0
        self.T -= np.outer(col, self.T[r])
        d -= d[q] * self.T[r]
        self.basis[r] = q

    def run(self, cost, allowed, max_iter):
        """Primal simplex from the current basic feasible point."""
        T = self.T
        basic = np.zeros(self.n, dtype=bool)
        basic[self.basis] = True
        d = cost - cost[self.basis] @ T
        stall = 0
        last = np.inf
        while self.nit < max_iter:
            # entering candidates: at lower with d < 0, at upper with d > 0
            score = np.where(self.at_upper, d, -d)
            score[basic | ~allowed] = -np.inf
            score[(self.upper <= 0) & ~basic] = -np.inf
            if stall > 50:
                cand = np.flatnonzero(score > OPT_TOL)
                if cand.size == 0:
                    return "optimal", d
                q = int(cand[0])
            else:
                q = int(np.argmax(score))
                if score[q] <= OPT_TOL:
                    return "optimal", d
            direction = -1.0 if self.at_upper[q] else 1.0
            alpha = T[:, q] * direction
            xb = self.x[self.basis]
            ub = self.upper[self.basis]
            theta = self.upper[q]
            r = -1
            to_upper = False
            pos = alpha > PIVOT_TOL
            neg = alpha < -PIVOT_TOL
            ratios = np.full(self.m, np.inf)
            ratios[pos] = np.maximum(xb[pos], 0.0) / alpha[pos]
            with np.errstate(invalid="ignore"):
                ratios_up = np.full(self.m, np.inf)
                ratios_up[neg] = np.maximum(ub[neg] - xb[neg], 0.0) / -alpha[neg]
            best = min(ratios.min(initial=np.inf), ratios_up.min(initial=np.inf))
            if best < theta:
                theta = best
                # among ties prefer the largest pivot magnitude, then lowest row
                tie = np.flatnonzero(
                    (ratios <= best + 1e-12) | (ratios_up <= best + 1e-12)
                )
                r = int(tie[np.argmax(np.abs(alpha[tie]))])
                to_upper = ratios_up[r] <= best + 1e-12 and not (ratios[r] <= best + 1e-12)
            if not np.isfinite(theta):
                return "unbounded", d
            self.nit += 1
            self.x[q] += direction * theta
            self.x[self.basis] -= theta * alpha
            if r < 0:
                self.at_upper[q] = not self.at_upper[q]
                self.x[q] = self.upper[q] if self.at_upper[q] else 0.0
            else:
                leaving = self.basis[r]
                self.pivot(r, q, d)
                basic[leaving] = False
                basic[q] = True
                self.at_upper[q] = False
                self.at_upper[leaving] = to_upper
                self.x[leaving] = self.upper[leaving] if to_upper else 0.0
            obj = float(cost @ self.x)
            if obj < last - 1e-12:
                last = obj
                stall = 0
            else:
                stall += 1
        return "iteration_limit", d


def linprog(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lb=None, ub=None,
            max_iter: int = 50000) -> LPResult:
    """Minimize ``c.x`` subject to linear constraints and simple bounds.

    Parameters
    ----------
    c : array of shape (n,)
    A_ub, b_ub : inequality rows ``A_ub x <= b_ub``
    A_eq, b_eq : equality rows
    lb, ub : bounds; ``lb`` defaults to 0 and must be finite, ``ub``
        defaults to +inf.

    Returns
    -------
    LPResult
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    n = c.shape[0]
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).reshape(-1)
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    lb = np.zeros(n) if lb is None else np.broadcast_to(np.asarray(lb, dtype=float), (n,)).copy()
    ub = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, dtype=float), (n,)).copy()
    if not np.all(np.isfinite(lb)):
        raise ValueError("lower bounds must be finite")
    if A_ub.shape[0] != b_ub.shape[0] or A_eq.shape[0] != b_eq.shape[0]:
        raise ValueError("constraint matrix and right-hand side differ in length")
    width = ub - lb
    if np.any(width < -FEAS_TOL):
        return LPResult("infeasible", None, None, 0)
    width = np.maximum(width, 0.0)

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    if m == 0:
        if np.any((c < 0) & ~np.isfinite(width)):
            return LPResult("unbounded", None, None, 0)
        x = lb + np.where(c < 0, width, 0.0)
        return LPResult("optimal", x, float(c @ x), 0)

    # shift to x' = x - lb and add one slack per inequality row
    rhs = np.concatenate([b_ub - A_ub @ lb, b_eq - A_eq @ lb])
    A = np.zeros((m, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    upper = np.concatenate([width, np.full(m_ub, np.inf)])
    cost = np.concatenate([c, np.zeros(m_ub)])

    # rows that can start with their slack basic skip the artificial
    slack_start = np.zeros(m, dtype=bool)
    slack_start[:m_ub] = rhs[:m_ub] >= 0
    flip = rhs < 0
    A[flip] *= -1
    rhs = np.abs(rhs)
    art_rows = np.flatnonzero(~slack_start)
    n_art = art_rows.size
    n_core = n + m_ub
    full = np.zeros((m, n_core + n_art))
    full[:, :n_core] = A
    full[art_rows, n_core + np.arange(n_art)] = 1.0
    upper_full = np.concatenate([upper, np.full(n_art, np.inf)])

    tab = _Tableau(full, rhs, upper_full)
    for r in range(m):
        if slack_start[r]:
            tab.basis[r] = n + r
        else:
            tab.basis[r] = n_core + int(np.searchsorted(art_rows, r))
    tab.x[tab.basis] = rhs
    allowed = np.ones(n_core + n_art, dtype=bool)

    if n_art:
        phase1 = np.zeros(n_core + n_art)
        phase1[n_core:] = 1.0
        status, _ = tab.run(phase1, allowed, max_iter)
        if status == "iteration_limit":
            return LPResult(status, None, None, tab.nit)
        infeas = tab.x[n_core:].sum()
        if infeas > FEAS_TOL * max(1.0, np.abs(rhs).max()):
            return LPResult("infeasible", None, None, tab.nit)
        # drive zero-valued artificials out of the basis
        dummy = np.zeros(n_core + n_art)
        keep = np.ones(m, dtype=bool)
        for r in range(m):
            if tab.basis[r] >= n_core:
                row = tab.T[r, :n_core].copy()
                row[tab.basis[tab.basis < n_core]] = 0.0
                cand = np.flatnonzero(np.abs(row) > PIVOT_TOL)
                if cand.size:
                    q = int(cand[np.argmax(np.abs(row[cand]))])
                    # the artificial is at zero, so no value changes
                    tab.pivot(r, q, dummy)
                    tab.at_upper[q] = False
                else:
                    keep[r] = False
        if not keep.all():
            tab.T = tab.T[keep]
            tab.basis = tab.basis[keep]
            tab.m = int(keep.sum())
        allowed[n_core:] = False
        tab.upper[n_core:] = 0.0
        tab.x[n_core:] = 0.0

    cost_full = np.concatenate([cost, np.zeros(n_art)])
    status, _ = tab.run(cost_full, allowed, max_iter)
    if status != "optimal":
        return LPResult(status, None, None, tab.nit)
    x = tab.x[:n] + lb
    # clean tiny bound violations from accumulated round-off
    x = np.minimum(np.maximum(x, lb), np.where(np.isfinite(ub), ub, np.inf))
    return LPResult("optimal", x, float(c @ x), tab.nit)
