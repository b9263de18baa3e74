"""Balanced partitioning of one treatment group into P equal-size samples.

Each sample must have covariate means within ``epsilon_k`` of the target
``B_k`` for every covariate k:

    |s * B_k - sum_i c_ip x_ik| <= epsilon_k * s      for all k, p

with ``c_ip`` in {0, 1}, ``sum_p c_ip <= 1`` and ``sum_i c_ip = s``.
Step 1 maximizes the common size s, Step 2 fixes it.

Small instances are solved exactly by branch and bound on the 0-1
program.  Large ones use an LP bound on s and an LP-rounding plus
local-search heuristic for feasible points; the result then carries
``proved_optimal=False`` unless the heuristic reaches the bound.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .bnb import solve_binary_program
from .simplex import linprog

CHECK_RTOL = 1e-9
EXACT_VAR_LIMIT = 60  # I * P up to this goes to branch and bound
DEFAULT_NODE_LIMIT = 200000
KICK_ROUNDS = 2
KICK_SIZE = 6


@dataclass
class PartitionProblem:
    """Data for one group's partitioning program.

    Parameters
    ----------
    covariates : (I, K) array
    template_means : (K,) targets B_k
    epsilons : (K,) positive tolerances
    P : number of disjoint samples
    s_bar : fixed size for Step 2, optional
    """

    covariates: np.ndarray
    template_means: np.ndarray
    epsilons: np.ndarray
    P: int = 1
    s_bar: Optional[int] = None
    covariate_names: List[str] = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(-1, 1)
        I, K = self.covariates.shape
        self.template_means = np.asarray(self.template_means, dtype=float).reshape(-1)
        self.epsilons = np.broadcast_to(
            np.asarray(self.epsilons, dtype=float), (K,)
        ).copy()
        if self.template_means.shape[0] != K:
            raise ValueError("template_means must have one entry per covariate")
        if np.any(~(self.epsilons > 0)):
            raise ValueError("epsilons must be positive")
        if int(self.P) != self.P or self.P < 1:
            raise ValueError("P must be a positive integer")
        self.P = int(self.P)
        if I < self.P:
            raise ValueError(f"need at least P={self.P} individuals, got {I}")
        if not np.all(np.isfinite(self.covariates)):
            raise ValueError("covariates must be finite")

    @property
    def n_individuals(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def deviations(self) -> np.ndarray:
        return self.covariates - self.template_means

    def to_dict(self):
        return {
            "label": self.label,
            "P": self.P,
            "s_bar": self.s_bar,
            "covariate_names": list(self.covariate_names),
            "template_means": self.template_means.tolist(),
            "epsilons": self.epsilons.tolist(),
            "covariates": self.covariates.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        K = len(d["template_means"])
        return cls(np.array(d["covariates"], dtype=float).reshape(-1, K),
                   d["template_means"], d["epsilons"], d.get("P", 1),
                   d.get("s_bar"), d.get("covariate_names", []), d.get("label", ""))


@dataclass
class PartitionSolution:
    """A 0-1 assignment plus what is known about its optimality."""

    assignment: np.ndarray  # (I, P) of 0/1
    s: int
    achieved_epsilons: np.ndarray
    proved_optimal: bool
    gap: float
    status: str = "optimal"  # optimal | feasible | infeasible
    mode: str = "max_size"
    upper_bound: Optional[float] = None
    nodes: int = 0

    @property
    def feasible(self) -> bool:
        return self.status != "infeasible"

    def samples(self) -> List[np.ndarray]:
        """Row indices of each sample, in ascending order."""
        return [np.flatnonzero(self.assignment[:, p]) for p in range(self.assignment.shape[1])]

    def to_dict(self):
        pairs = [[int(i), int(p)] for i, p in zip(*np.nonzero(self.assignment))]
        return {
            "assignment": pairs,
            "shape": list(self.assignment.shape),
            "s": int(self.s),
            "achieved_epsilons": [float(v) for v in self.achieved_epsilons],
            "proved_optimal": bool(self.proved_optimal),
            "gap": float(self.gap),
            "status": self.status,
            "mode": self.mode,
            "upper_bound": None if self.upper_bound is None else float(self.upper_bound),
            "nodes": int(self.nodes),
        }

    @classmethod
    def from_dict(cls, d):
        I, P = d["shape"]
        a = np.zeros((I, P), dtype=np.int8)
        for i, p in d["assignment"]:
            a[i, p] = 1
        return cls(a, d["s"], np.array(d["achieved_epsilons"], dtype=float),
                   d["proved_optimal"], d["gap"], d.get("status", "optimal"),
                   d.get("mode", "max_size"), d.get("upper_bound"), d.get("nodes", 0))


def achieved_epsilons(problem: PartitionProblem, assignment) -> np.ndarray:
    """Smallest epsilons the assignment satisfies: max over samples of
    |mean - B_k|."""
    a = np.asarray(assignment, dtype=float)
    sizes = a.sum(axis=0)
    if a.shape[1] == 0 or sizes.max(initial=0) == 0:
        return np.zeros(problem.n_covariates)
    sums = a.T @ problem.deviations()
    with np.errstate(invalid="ignore", divide="ignore"):
        dev = np.abs(sums) / sizes[:, None]
    dev[sizes == 0] = 0.0
    return dev.max(axis=0)


def check_partition(problem: PartitionProblem, assignment, s: int,
                    epsilons=None) -> List[str]:
    """Independent re-check of every constraint; returns violation messages."""
    a = np.asarray(assignment)
    errs = []
    I, K = problem.covariates.shape
    if a.shape != (I, problem.P):
        return [f"assignment shape {a.shape} != {(I, problem.P)}"]
    if not np.all((a == 0) | (a == 1)):
        errs.append("assignment entries must be 0 or 1")
    rows = a.sum(axis=1)
    for i in np.flatnonzero(rows > 1):
        errs.append(f"individual {i} is in {int(rows[i])} samples")
    cols = a.sum(axis=0)
    for p in np.flatnonzero(cols != s):
        errs.append(f"sample {p} has size {int(cols[p])}, expected {s}")
    eps = problem.epsilons if epsilons is None else np.asarray(epsilons, dtype=float)
    sums = a.T.astype(float) @ problem.deviations()
    scale = np.abs(a.T.astype(float)) @ np.abs(problem.covariates) + s * np.abs(problem.template_means)
    slack = eps * s + CHECK_RTOL * np.maximum(1.0, scale)
    bad = np.abs(sums) > slack
    for p, k in zip(*np.nonzero(bad)):
        name = problem.covariate_names[k] if k < len(problem.covariate_names) else str(k)
        errs.append(
            f"sample {p}, covariate {name}: |s*B - sum| = {abs(sums[p, k]):.6g} > eps*s = {eps[k] * s:.6g}"
        )
    return errs


# --- internal helpers ---------------------------------------------------------

def _active_columns(dev):
    # a covariate equal to its target for everyone never binds
    return np.flatnonzero(np.any(dev != 0, axis=0))


def _count_feasible(dev, eps, P, s):
    """Necessary condition from two-valued covariates.

    If covariate k takes only the values v0 < v1 in the group, a sample of
    size s with n members at v1 sums to n*v1 + (s-n)*v0, so n must be an
    integer in a computable window.  Every sample needs at least the
    window's lower end of v1 members (and of v0 members likewise), which
    the group may not have P times over.  The LP bound ignores this
    integer rounding.
    """
    if s <= 0:
        return True
    for k in range(dev.shape[1]):
        vals = np.unique(dev[:, k])
        if vals.size != 2:
            continue
        v0, v1 = vals
        n1 = int(np.sum(dev[:, k] == v1))
        n0 = dev.shape[0] - n1
        tol = CHECK_RTOL * max(1.0, s * max(abs(v0), abs(v1)))
        width = v1 - v0
        lo = math.ceil((-eps[k] * s - s * v0 - tol) / width - 1e-12)
        hi = math.floor((eps[k] * s - s * v0 + tol) / width + 1e-12)
        lo, hi = max(lo, 0), min(hi, s)
        if lo > hi or P * lo > n1 or P * (s - hi) > n0:
            return False
    return True


def _aggregate_bound(dev, eps):
    """LP bound on P*s: max sum y with sum_i y_i (+-d_ik - eps_k) <= 0."""
    I = dev.shape[0]
    if dev.shape[1] == 0:
        return float(I)
    A = np.vstack([(dev - eps).T, (-dev - eps).T])
    res = linprog(-np.ones(I), A, np.zeros(A.shape[0]), ub=np.ones(I))
    if res.status != "optimal":
        raise RuntimeError(f"aggregate LP failed: {res.status}")
    return -res.fun


def _aggregate_feasible(dev, eps, total):
    """Can fractional y with sum y = total meet the summed constraints?"""
    I = dev.shape[0]
    A = np.vstack([(dev - eps).T, (-dev - eps).T])
    res = linprog(np.zeros(I), A, np.zeros(A.shape[0]),
                  np.ones((1, I)), [float(total)], ub=np.ones(I))
    return res.status == "optimal"


def _milp(dev, eps, P, s, mode, node_limit):
    """Exact branch and bound for a fixed size s."""
    I, K = dev.shape
    nc = I * P
    # variable order: c_ip at index i * P + p, then epsilons in min mode
    n = nc + (K if mode == "min_total_epsilon" else 0)
    rows, rhs = [], []
    for i in range(I):
        r = np.zeros(n)
        r[i * P:(i + 1) * P] = 1.0
        rows.append(r)
        rhs.append(1.0)
    for p in range(P):
        for k in range(K):
            for sign in (1.0, -1.0):
                r = np.zeros(n)
                r[p:nc:P] = sign * dev[:, k]
                if mode == "min_total_epsilon":
                    r[nc + k] = -float(s)
                    rhs.append(0.0)
                else:
                    rhs.append(eps[k] * s)
                rows.append(r)
    A_eq = np.zeros((P, n))
    for p in range(P):
        A_eq[p, p:nc:P] = 1.0
    b_eq = np.full(P, float(s))
    c = np.zeros(n)
    binary = np.zeros(n, dtype=bool)
    binary[:nc] = True
    ub = np.ones(n)
    if mode == "min_total_epsilon":
        c[nc:] = 1.0
        ub[nc:] = np.inf
    # sample labels are exchangeable: order samples by their first member
    fixed = np.zeros(n, dtype=bool)
    for i in range(min(I, P)):
        fixed[i * P + i + 1:(i + 1) * P] = True
    res = solve_binary_program(c, np.array(rows), np.array(rhs), A_eq, b_eq,
                               binary=binary, ub=ub, fixed_zero=fixed,
                               node_limit=node_limit,
                               first_feasible=(mode == "feasibility"))
    if res.x is None:
        return None, res
    a = np.round(res.x[:nc]).astype(np.int8).reshape(I, P)
    return a, res


def _violation(sums, limit):
    return np.maximum(np.abs(sums) - limit, 0.0).sum()


def _select_rows(dev, eps, pool, count, scale, center=False):
    """Pick ``count`` rows of ``pool`` whose summed deviations are as close
    to zero as an LP allows (min max scaled deviation), rounded greedily.
    With ``center`` the deviations are taken from the pool mean, so the
    rows left behind keep the same mean as the chosen ones."""
    D = dev[pool] / scale
    if center:
        D = D - D.mean(axis=0)
    m = pool.size
    if count == m:
        return pool.copy()
    K = D.shape[1]
    # variables y (m) and t; rows +-D^T y - t <= 0
    A = np.zeros((2 * K, m + 1))
    A[:K, :m] = D.T
    A[K:, :m] = -D.T
    A[:, m] = -1.0
    A_eq = np.zeros((1, m + 1))
    A_eq[0, :m] = 1.0
    c = np.zeros(m + 1)
    c[m] = 1.0
    ub = np.ones(m + 1)
    ub[m] = np.inf
    res = linprog(c, A, np.zeros(2 * K), A_eq, [float(count)], ub=ub)
    y = res.x[:m] if res.status == "optimal" else np.full(m, count / m)
    # keep confident ones, then fill greedily by the running sum
    chosen = list(np.flatnonzero(y > 1 - 1e-6)[:count])
    total = D[chosen].sum(axis=0) if chosen else np.zeros(K)
    rest = [j for j in np.argsort(-y, kind="stable") if j not in set(chosen)]
    rest = np.array(rest, dtype=int)
    avail = np.ones(rest.size, dtype=bool)
    while len(chosen) < count:
        cand = rest[avail]
        score = np.abs(total + D[cand]).max(axis=1)
        pick = int(np.argmin(score))
        j = cand[pick]
        chosen.append(int(j))
        total = total + D[j]
        avail[np.flatnonzero(avail)[pick]] = False
    return np.sort(pool[np.array(chosen, dtype=int)])


def _local_search(dev, limit, labels, P, objective="violation", max_moves=20000):
    """Swap members between samples (label 0..P-1) and the unused pool
    (label P) to reduce the total violation, or in ``"epsilon"`` mode the
    sum over covariates of the largest |sum| across samples."""
    sums = np.vstack([dev[labels == p].sum(axis=0) for p in range(P)])

    def score(S):
        if objective == "violation":
            return _violation(S, limit)
        return np.abs(S).max(axis=0).sum()

    current = score(sums)
    for _ in range(max_moves):
        if objective == "violation" and current <= 0:
            break
        best = (current - 1e-12, None)
        if objective == "violation":
            violated = np.maximum(np.abs(sums) - limit, 0).sum(axis=1) > 0
        else:
            violated = np.ones(P, dtype=bool)
        for p in range(P):
            members = np.flatnonzero(labels == p)
            for q in range(P + 1):
                if q == p or (q < p and q < P):
                    continue
                # swapping between two satisfied samples cannot help
                if not violated[p] and (q == P or not violated[q]):
                    continue
                others = np.flatnonzero(labels == q)
                if others.size == 0 or members.size == 0:
                    continue
                # delta[a, b] = dev[b] - dev[a] for a in p, b in q
                Dp = dev[members]
                Dq = dev[others]
                newp = sums[p][None, None, :] - Dp[:, None, :] + Dq[None, :, :]
                if objective == "violation":
                    rest = _violation(np.delete(sums, p, axis=0), limit)
                    if q < P:
                        newq = sums[q][None, None, :] + Dp[:, None, :] - Dq[None, :, :]
                        rest = _violation(np.delete(sums, [p, q], axis=0), limit)
                        val = (np.maximum(np.abs(newp) - limit, 0).sum(axis=2)
                               + np.maximum(np.abs(newq) - limit, 0).sum(axis=2) + rest)
                    else:
                        val = np.maximum(np.abs(newp) - limit, 0).sum(axis=2) + rest
                else:
                    others_abs = np.abs(np.delete(sums, [p] + ([q] if q < P else []), axis=0))
                    base = others_abs.max(axis=0) if others_abs.size else np.zeros(dev.shape[1])
                    m = np.maximum(np.abs(newp), base)
                    if q < P:
                        newq = sums[q][None, None, :] + Dp[:, None, :] - Dq[None, :, :]
                        m = np.maximum(m, np.abs(newq))
                    val = m.sum(axis=2)
                a, b = np.unravel_index(int(np.argmin(val)), val.shape)
                if val[a, b] < best[0]:
                    best = (float(val[a, b]), (p, q, members[a], others[b]))
        if best[1] is None:
            break
        p, q, i, j = best[1]
        labels[i], labels[j] = q, p
        sums[p] += dev[j] - dev[i]
        if q < P:
            sums[q] += dev[i] - dev[j]
        current = best[0]
    return labels, current


def _heuristic(dev, eps, P, s, mode="feasibility"):
    """LP rounding then swaps; returns an assignment or None."""
    I, K = dev.shape
    scale = eps if mode == "feasibility" else np.ones(K)
    limit = eps * s
    union = _select_rows(dev, eps, np.arange(I), P * s, scale)
    labels = np.full(I, P, dtype=int)
    pool = union
    for p in range(P - 1):
        chosen = _select_rows(dev, eps, pool, s, scale, center=True)
        labels[chosen] = p
        pool = np.setdiff1d(pool, chosen)
    labels[pool] = P - 1
    labels, v = _local_search(dev, limit, labels, P, "violation")
    # escape local minima with a few seeded random swaps, keeping the best
    rng = np.random.default_rng(s)
    best_labels, best_v = labels.copy(), v
    for _ in range(KICK_ROUNDS):
        if best_v <= 0:
            break
        labels = best_labels.copy()
        for _ in range(KICK_SIZE):
            p = int(rng.integers(P))
            q = int(rng.integers(P + 1))
            a_idx = np.flatnonzero(labels == p)
            b_idx = np.flatnonzero(labels == q)
            if q == p or a_idx.size == 0 or b_idx.size == 0:
                continue
            i, j = rng.choice(a_idx), rng.choice(b_idx)
            labels[i], labels[j] = q, p
        labels, v = _local_search(dev, limit, labels, P, "violation")
        if v < best_v:
            best_labels, best_v = labels.copy(), v
    labels = best_labels
    if best_v > 0:
        return None
    a = np.zeros((I, P), dtype=np.int8)
    for p in range(P):
        a[labels == p, p] = 1
    return a


def _labels_to_assignment(labels, P):
    a = np.zeros((labels.shape[0], P), dtype=np.int8)
    for p in range(P):
        a[labels == p, p] = 1
    return a


def _grow(dev, eps, labels, P, target):
    """Enlarge every sample to ``target`` members from the unused pool,
    greedily, then repair by local search.  Returns labels or None."""
    labels = labels.copy()
    sums = np.vstack([dev[labels == p].sum(axis=0) for p in range(P)])
    for p in range(P):
        while np.sum(labels == p) < target:
            pool = np.flatnonzero(labels == P)
            if pool.size == 0:
                return None
            score = (np.abs(sums[p] + dev[pool]) / eps).max(axis=1)
            j = pool[int(np.argmin(score))]
            labels[j] = p
            sums[p] += dev[j]
    labels, v = _local_search(dev, eps * target, labels, P, "violation")
    return labels if v <= 0 else None


def _max_size_heuristic(problem, dev, eps, s_ub):
    """Large-instance Step 1: try the LP bound, otherwise find a feasible
    size a little below it and grow one size at a time while the local
    search keeps succeeding."""
    I, P = problem.n_individuals, problem.P

    def done(a, s, proved):
        gap = 0.0 if proved else float(s_ub - s)
        return PartitionSolution(a, s, achieved_epsilons(problem, a), proved, gap,
                                 "optimal" if proved else "feasible", "max_size",
                                 float(s_ub), 0)

    a = _heuristic(dev, eps, P, s_ub)
    if a is not None:
        return done(a, s_ub, True)
    step = max(2, int(math.ceil(0.05 * s_ub)))
    s = s_ub - step
    while s >= 1:
        a = _heuristic(dev, eps, P, s)
        if a is not None:
            break
        step *= 2
        s = s_ub - step
    if s < 1:
        return done(np.zeros((I, P), dtype=np.int8), 0, False)
    labels = np.full(I, P, dtype=int)
    for p in range(P):
        labels[a[:, p] == 1] = p
    best = s
    while best + 1 < s_ub:
        grown = None
        for target in (best + 1, best + 2):
            if target >= s_ub:
                break
            grown = _grow(dev, eps, labels, P, target)
            if grown is not None:
                labels, best = grown, target
                break
        if grown is None:
            break
    return done(_labels_to_assignment(labels, P), best, False)


def _finalize(problem, a, s, **kw):
    if a is None:
        a = np.zeros((problem.n_individuals, problem.P), dtype=np.int8)
    return PartitionSolution(a, s, achieved_epsilons(problem, a), **kw)


# --- public operations --------------------------------------------------------

def fixed_size_partition(problem: PartitionProblem, s_bar: int,
                         mode: str = "feasibility",
                         node_limit: int = DEFAULT_NODE_LIMIT) -> PartitionSolution:
    """Partition into P samples of exactly ``s_bar`` members.

    ``mode="feasibility"`` looks for any assignment meeting the given
    epsilons; ``mode="min_total_epsilon"`` treats the epsilons as free
    variables and minimizes their sum.  Infeasibility is returned as a
    solution with ``status="infeasible"`` (proved or not, see
    ``proved_optimal``), never raised.
    """
    if mode not in ("feasibility", "min_total_epsilon"):
        raise ValueError(f"unknown mode {mode!r}")
    s_bar = int(s_bar)
    if s_bar < 0:
        raise ValueError("s_bar must be >= 0")
    I, P = problem.n_individuals, problem.P
    if s_bar == 0:
        return _finalize(problem, None, 0, proved_optimal=True, gap=0.0, mode=mode)
    if P * s_bar > I:
        return _finalize(problem, None, s_bar, proved_optimal=True, gap=0.0,
                         status="infeasible", mode=mode)
    dev_all = problem.deviations()
    cols = _active_columns(dev_all)
    dev = dev_all[:, cols]
    eps = problem.epsilons[cols]
    if dev.shape[1] == 0:
        a = np.zeros((I, P), dtype=np.int8)
        for p in range(P):
            a[p * s_bar:(p + 1) * s_bar, p] = 1
        return _finalize(problem, a, s_bar, proved_optimal=True, gap=0.0, mode=mode)

    if mode == "feasibility" and not (_count_feasible(dev, eps, P, s_bar)
                                      and _aggregate_feasible(dev, eps, P * s_bar)):
        return _finalize(problem, None, s_bar, proved_optimal=True, gap=0.0,
                         status="infeasible", mode=mode)

    if I * P <= EXACT_VAR_LIMIT:
        a, res = _milp(dev, eps, P, s_bar, mode, node_limit)
        proved = res.status != "node_limit"
        if a is None:
            return _finalize(problem, None, s_bar, proved_optimal=proved,
                             gap=0.0 if proved else math.inf, status="infeasible",
                             mode=mode, nodes=res.nodes)
        gap = 0.0 if proved else res.gap
        return _finalize(problem, a, s_bar, proved_optimal=proved, gap=gap,
                         status="optimal" if proved else "feasible", mode=mode,
                         nodes=res.nodes)

    a = _heuristic(dev, eps, P, s_bar)
    if mode == "feasibility":
        if a is None:
            return _finalize(problem, None, s_bar, proved_optimal=False, gap=math.inf,
                             status="infeasible", mode=mode)
        return _finalize(problem, a, s_bar, proved_optimal=True, gap=0.0, mode=mode)
    # min total epsilon: start from a feasible point when there is one
    if a is None:
        a = _heuristic(dev, np.full_like(eps, 1e6), P, s_bar)
    labels = np.full(I, P, dtype=int)
    for p in range(P):
        labels[a[:, p] == 1] = p
    labels, _ = _local_search(dev, eps * s_bar, labels, P, "epsilon")
    a = np.zeros((I, P), dtype=np.int8)
    for p in range(P):
        a[labels == p, p] = 1
    return _finalize(problem, a, s_bar, proved_optimal=False, gap=math.inf,
                     status="feasible", mode=mode)


def max_size_partition(problem: PartitionProblem,
                       node_limit: int = DEFAULT_NODE_LIMIT) -> PartitionSolution:
    """Largest common size s of P disjoint balanced samples.

    Feasibility is not monotone in s (a size can fail while a larger one
    works), so sizes are scanned downward from an LP upper bound and each
    is decided by a fixed-size solve.  The first feasible size is optimal
    when every larger candidate was proved infeasible.
    """
    I, P = problem.n_individuals, problem.P
    dev_all = problem.deviations()
    cols = _active_columns(dev_all)
    total = _aggregate_bound(dev_all[:, cols], problem.epsilons[cols])
    s_ub = min(I // P, int(math.floor(total / P + 1e-7)))
    dev_act, eps_act = dev_all[:, cols], problem.epsilons[cols]
    while s_ub > 0 and not _count_feasible(dev_act, eps_act, P, s_ub):
        s_ub -= 1
    if I * P > EXACT_VAR_LIMIT and cols.size and s_ub > 0:
        return _max_size_heuristic(problem, dev_all[:, cols], problem.epsilons[cols], s_ub)
    unresolved = None
    nodes = 0
    for s in range(s_ub, 0, -1):
        sol = fixed_size_partition(problem, s, "feasibility", node_limit)
        nodes += sol.nodes
        if sol.status != "infeasible":
            proved = unresolved is None and sol.proved_optimal
            gap = 0.0 if proved else float((unresolved or s) - s)
            return PartitionSolution(sol.assignment, s, sol.achieved_epsilons,
                                     proved, gap, "optimal" if proved else "feasible",
                                     "max_size", float(s_ub), nodes)
        if not sol.proved_optimal and unresolved is None:
            unresolved = s
    proved = unresolved is None
    return PartitionSolution(np.zeros((I, P), dtype=np.int8), 0,
                             np.zeros(problem.n_covariates), proved,
                             0.0 if proved else float(unresolved),
                             "optimal" if proved else "feasible", "max_size",
                             float(s_ub), nodes)


def brute_force_partition(problem: PartitionProblem, s_bar: Optional[int] = None,
                          mode: str = "max_size"):
    """Exhaustive search over all (P+1)^I row assignments (testing oracle).

    Returns the optimal size for ``mode="max_size"``; for a fixed ``s_bar``
    returns whether it is feasible (``mode="feasibility"``) or the minimum
    total epsilon, ``None`` when no assignment has that size
    (``mode="min_total_epsilon"``).
    """
    I, P = problem.n_individuals, problem.P
    if I > 12 or P > 2:
        raise ValueError("brute force is limited to I <= 12 and P <= 2")
    labels = np.array(list(itertools.product(range(P + 1), repeat=I)), dtype=np.int8)
    dev = problem.deviations()
    counts = np.stack([(labels == p + 1).sum(axis=1) for p in range(P)], axis=1)
    equal = np.all(counts == counts[:, :1], axis=1)
    sizes = counts[:, 0]
    sums = np.stack([(labels == p + 1).astype(float) @ dev for p in range(P)], axis=1)
    scale = np.stack([(labels == p + 1).astype(float) @ np.abs(problem.covariates)
                      for p in range(P)], axis=1) + sizes[:, None, None] * np.abs(problem.template_means)
    tol = CHECK_RTOL * np.maximum(1.0, scale)
    if mode == "max_size":
        ok = equal & np.all(np.abs(sums) <= problem.epsilons * sizes[:, None, None] + tol, axis=(1, 2))
        return int(sizes[ok].max(initial=0))
    sel = equal & (sizes == s_bar)
    if mode == "feasibility":
        ok = np.all(np.abs(sums) <= problem.epsilons * s_bar + tol, axis=(1, 2))
        return bool(np.any(sel & ok))
    if mode == "min_total_epsilon":
        if not np.any(sel):
            return None
        if s_bar == 0:
            return 0.0
        obj = (np.abs(sums[sel]).max(axis=1) / s_bar).sum(axis=1)
        return float(obj.min())
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class StepsResult:
    s_bar: int
    step1: List[PartitionSolution]
    step2: List[PartitionSolution]

    def samples(self) -> List[List[np.ndarray]]:
        return [sol.samples() for sol in self.step2]


class InfeasibleMatching(RuntimeError):
    pass


def run_steps_1_2(problems: Sequence[PartitionProblem], mode: str = "feasibility",
                  node_limit: int = DEFAULT_NODE_LIMIT, threads: int = 1) -> StepsResult:
    """Step 1 per group, s_bar = min of the optima, then Step 2 at s_bar.

    Raises ``InfeasibleMatching`` naming the group when Step 2 fails.
    """
    problems = list(problems)
    if not problems:
        raise ValueError("no problems given")
    K = problems[0].n_covariates
    P = problems[0].P
    for prob in problems:
        if prob.n_covariates != K or prob.P != P:
            raise ValueError("all problems must share K and P")

    def _map(fn, items):
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as ex:
                return list(ex.map(fn, items))
        return [fn(x) for x in items]

    step1 = _map(lambda pr: max_size_partition(pr, node_limit), problems)
    s_bar = min(sol.s for sol in step1)
    step2 = []
    for g, (prob, sol1) in enumerate(zip(problems, step1), start=1):
        if mode == "feasibility" and sol1.s == s_bar:
            # the Step-1 solution is already a witness at s_bar
            sol = PartitionSolution(sol1.assignment.copy(), s_bar, sol1.achieved_epsilons,
                                    True, 0.0, "optimal", "feasibility", None, 0)
        else:
            sol = fixed_size_partition(prob, s_bar, mode, node_limit)
        if sol.status == "infeasible":
            raise InfeasibleMatching(
                f"group {prob.label or g}: no balanced partition of size {s_bar}"
            )
        step2.append(sol)
    return StepsResult(s_bar, step1, step2)
