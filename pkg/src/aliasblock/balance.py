"""Covariate balance between the +1 and -1 sides of each block type.

Each cell of a balance table is a permutation test of the difference in
means under complete randomization of the pooled individuals to the two
sides; a row's six per-type p-values are combined by the truncated
product method.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .blocks import BlockDesign, BlockTypePlan, default_plan
from .design import contrast_orthogonality
from .population import GROUP_SIGNS, StudyPopulation

ELIGIBILITY_SYMBOLS = {"LE": 0, "IU": 1, "TIME": 2}
DEFAULT_DRAWS = 10000
_CHUNK = 1000


def split_by_contrast(design: BlockDesign, type_id: int):
    """Individual ids on the +1 and -1 sides of one block type."""
    blocks = design.of_type(type_id)
    if not blocks:
        raise ValueError(f"no blocks of type {type_id}")
    plus = [m.individual_id for b in blocks for m in b.members if m.sign > 0]
    minus = [m.individual_id for b in blocks for m in b.members if m.sign < 0]
    return plus, minus


@dataclass(frozen=True)
class FeatureSpec:
    """A covariate, optionally multiplied by eligibility signs; or a bare
    product of eligibility signs."""

    name: str
    covariate: Optional[str]
    symbols: tuple

    @classmethod
    def parse(cls, text: str, covariate_names: Sequence[str]) -> "FeatureSpec":
        parts = [t.strip() for t in text.split("*") if t.strip()]
        if not parts:
            raise ValueError(f"empty feature spec {text!r}")
        cov = None
        syms = []
        for t in parts:
            if t in ELIGIBILITY_SYMBOLS:
                syms.append(t)
            elif t in covariate_names:
                if cov is not None:
                    raise ValueError(f"feature {text!r} names two covariates")
                cov = t
            else:
                raise ValueError(f"unknown name {t!r} in feature {text!r}")
        return cls("*".join(parts), cov, tuple(syms))

    def values(self, pop: StudyPopulation) -> np.ndarray:
        out = pop.covariate(self.covariate).copy() if self.covariate else np.ones(len(pop))
        for s in self.symbols:
            out = out * pop.w[:, ELIGIBILITY_SYMBOLS[s]]
        return out

    def group_pattern(self, group_targets: Optional[np.ndarray], covariate_names) -> np.ndarray:
        """Expected feature value per group: target times the sign product."""
        if self.covariate is None:
            base = np.ones(8)
        elif group_targets is None:
            base = np.ones(8)
        else:
            base = np.asarray(group_targets)[:, list(covariate_names).index(self.covariate)]
        signs = np.ones(8)
        for s in self.symbols:
            signs = signs * np.array([GROUP_SIGNS[g][ELIGIBILITY_SYMBOLS[s]] for g in range(1, 9)])
        return base * signs


def interaction_feature(pop: StudyPopulation, spec: str) -> np.ndarray:
    """Values of ``spec`` such as ``age``, ``age*LE`` or ``age*LE*TIME``."""
    return FeatureSpec.parse(spec, pop.covariate_names).values(pop)


def default_features(covariate_names: Sequence[str]) -> List[str]:
    base = list(covariate_names)
    out = base + ["LE", "IU", "TIME"]
    for suffix in ("LE", "IU", "LE*IU", "LE*TIME", "IU*TIME"):
        out += [f"{c}*{suffix}" for c in base]
    return out


# --- permutation p-values ---------------------------------------------------

def _tolerance(values):
    return 1e-12 * max(1.0, float(np.abs(values).max(initial=0.0)))


def _stats_from_sums(S, total, m, N):
    return S / m - (total - S) / (N - m)


def _exact_masks(N, m):
    combos = np.array(list(itertools.combinations(range(N), m)), dtype=int)
    M = np.zeros((combos.shape[0], N))
    np.put_along_axis(M, combos, 1.0, axis=1)
    return M


def _random_masks(rng, N, m, count):
    U = rng.random((count, N))
    idx = np.argpartition(U, m - 1, axis=1)[:, :m] if m < N else np.tile(np.arange(N), (count, 1))
    M = np.zeros((count, N))
    np.put_along_axis(M, idx, 1.0, axis=1)
    return M


def permutation_pvalues(values_plus, values_minus, draws: int = DEFAULT_DRAWS,
                        seed=0) -> np.ndarray:
    """Two-sided permutation p-values for the difference in means, one per
    column of the (n, F) inputs, all computed from the same draws.

    Enumerates every split when there are at most ``draws`` of them
    (exact p-value); otherwise uses ``draws`` random splits and counts the
    observed one, giving p = (1 + #{|T*| >= |T|}) / (draws + 1).  A column
    with no variation gets p = 1.
    """
    A = np.asarray(values_plus, dtype=float)
    B = np.asarray(values_minus, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    m, n = A.shape[0], B.shape[0]
    if m == 0 or n == 0:
        raise ValueError("both samples must be nonempty")
    if draws < 1:
        raise ValueError("draws must be positive")
    X = np.vstack([A, B])
    N = m + n
    total = X.sum(axis=0)
    obs = np.abs(A.mean(axis=0) - B.mean(axis=0))
    # canonical row order and drawing the smaller side make the p-value a
    # function of the pooled values alone, so swapping labels changes nothing
    X = X[np.lexsort(X.T[::-1])]
    m = min(m, n)
    tol = np.array([_tolerance(X[:, f]) for f in range(X.shape[1])])
    degenerate = np.ptp(X, axis=0) == 0
    n_splits = math.comb(N, m)
    counts = np.zeros(X.shape[1])
    if n_splits <= draws:
        M = _exact_masks(N, m)
        T = np.abs(_stats_from_sums(M @ X, total, m, N))
        counts = (T >= obs - tol).sum(axis=0)
        p = counts / n_splits
    else:
        rng = np.random.default_rng(seed)
        done = 0
        while done < draws:
            c = min(_CHUNK, draws - done)
            M = _random_masks(rng, N, m, c)
            T = np.abs(_stats_from_sums(M @ X, total, m, N))
            counts += (T >= obs - tol).sum(axis=0)
            done += c
        p = (1.0 + counts) / (draws + 1.0)
    p = np.minimum(p, 1.0)
    p[degenerate] = 1.0
    return p


def permutation_balance_pvalue(values_plus, values_minus, draws: int = DEFAULT_DRAWS,
                               seed=0) -> float:
    """Single-feature version of :func:`permutation_pvalues`."""
    return float(permutation_pvalues(np.asarray(values_plus, dtype=float).reshape(-1, 1),
                                     np.asarray(values_minus, dtype=float).reshape(-1, 1),
                                     draws, seed)[0])


# --- truncated product --------------------------------------------------------

def truncated_product(pvalues, tau: float = 0.2) -> float:
    """Combined p-value of the truncated product of independent p-values.

    W is the product of the p-values at or below ``tau`` (1 if none).  The
    null distribution is
    P(W <= w) = sum_k C(L,k) (1-tau)^(L-k) A_k with
    A_k = w sum_{s<k} (k ln tau - ln w)^s / s!  if w <= tau^k, else tau^k.
    ``tau = 1`` gives Fisher's method.
    """
    p = np.asarray(pvalues, dtype=float).reshape(-1)
    if not (0 < tau <= 1):
        raise ValueError("tau must be in (0, 1]")
    if np.any((p < 0) | (p > 1) | np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    L = p.size
    kept = p[p <= tau]
    if kept.size == 0:
        return 1.0
    if np.any(kept == 0):
        return 0.0
    log_w = float(np.log(kept).sum())
    log_tau = math.log(tau)
    total = 0.0
    for k in range(1, L + 1):
        weight = math.comb(L, k) * (1.0 - tau) ** (L - k)
        if weight == 0.0:
            continue
        if log_w <= k * log_tau:
            x = k * log_tau - log_w  # >= 0
            # w * sum_{s<k} x^s/s!, summed in log space for stability
            terms = [s * math.log(x) - math.lgamma(s + 1) if x > 0 else (0.0 if s == 0 else -math.inf)
                     for s in range(k)]
            mx = max(terms)
            inner = mx + math.log(sum(math.exp(t - mx) for t in terms))
            total += weight * math.exp(log_w + inner)
        else:
            total += weight * tau ** k
    return float(min(max(total, 0.0), 1.0))


def fisher_combination(pvalues) -> float:
    from scipy.stats import chi2
    p = np.asarray(pvalues, dtype=float)
    return float(chi2.sf(-2.0 * np.log(p).sum(), 2 * p.size))


# --- tables -------------------------------------------------------------------

@dataclass
class BalanceCell:
    feature: str
    type_id: int
    p_value: float
    mean_plus: float
    mean_minus: float
    std_diff: float
    aliased: bool


@dataclass
class BalanceTable:
    features: List[str]
    type_ids: List[int]
    cells: Dict[tuple, BalanceCell] = field(default_factory=dict)
    combined: Dict[str, float] = field(default_factory=dict)
    draws: int = DEFAULT_DRAWS
    seed: int = 0
    tau: float = 0.2

    def p(self, feature, type_id) -> float:
        return self.cells[(feature, type_id)].p_value

    def summary(self) -> Dict[str, float]:
        ps = np.array([c.p_value for c in self.cells.values()])
        if ps.size == 0:
            return {"count": 0}
        q = np.quantile(ps, [0.25, 0.5, 0.75])
        return {"count": int(ps.size), "min": float(ps.min()), "lower_quartile": float(q[0]),
                "median": float(q[1]), "upper_quartile": float(q[2])}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", *[f"type_{t}" for t in self.type_ids], "combined"])
        for f in self.features:
            w.writerow([f, *[repr(self.p(f, t)) for t in self.type_ids], repr(self.combined[f])])
        return buf.getvalue()

    def to_dict(self):
        rows = []
        for f in self.features:
            rows.append({
                "feature": f,
                "combined": self.combined[f],
                "cells": [
                    {"type_id": t, "p_value": c.p_value, "mean_plus": c.mean_plus,
                     "mean_minus": c.mean_minus, "std_diff": c.std_diff, "aliased": c.aliased}
                    for t in self.type_ids for c in [self.cells[(f, t)]]
                ],
            })
        return {"draws": self.draws, "seed": self.seed, "truncation": self.tau,
                "type_seeds": {str(t): [self.seed, t] for t in self.type_ids},
                "summary": self.summary(), "rows": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def balance_table(design: BlockDesign, pop: StudyPopulation, features: Sequence[str],
                  draws: int = DEFAULT_DRAWS, seed: int = 0, tau: float = 0.2,
                  group_targets=None, plan: Optional[Sequence[BlockTypePlan]] = None,
                  threads: int = 1) -> BalanceTable:
    """Per-type permutation p-values for each feature plus the combined column.

    ``group_targets`` (8 x K, raw covariate units) drives the design-based
    ``aliased`` flag of each cell: a feature is aliased in a block type when
    its expected group pattern is not orthogonal to the type's contrast.
    Every feature of a block type shares the same permutation draws,
    seeded from ``(seed, type_id)``.
    """
    plan = list(plan or default_plan())
    specs = [FeatureSpec.parse(f, pop.covariate_names) for f in features]
    type_ids = sorted(pl.type_id for pl in plan)
    table = BalanceTable([s.name for s in specs], type_ids, draws=draws, seed=seed, tau=tau)
    if not specs:
        return table
    F = np.column_stack([s.values(pop) for s in specs])
    by_type = {pl.type_id: pl for pl in plan}

    def one_type(t):
        plus, minus = split_by_contrast(design, t)
        A = F[pop.index_of(plus)]
        B = F[pop.index_of(minus)]
        p = permutation_pvalues(A, B, draws, seed=[int(seed), int(t)])
        return t, A, B, p

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one_type, type_ids))
    else:
        results = [one_type(t) for t in type_ids]
    for t, A, B, p in results:
        h = by_type[t].contrast()
        pooled_sd = np.vstack([A, B]).std(axis=0)
        for j, s in enumerate(specs):
            mp, mm = float(A[:, j].mean()), float(B[:, j].mean())
            sdiff = (mp - mm) / pooled_sd[j] if pooled_sd[j] > 0 else 0.0
            _, aliased = contrast_orthogonality(h, s.group_pattern(group_targets, pop.covariate_names))
            table.cells[(s.name, t)] = BalanceCell(s.name, t, float(p[j]), mp, mm, float(sdiff), bool(aliased))
    for s in specs:
        table.combined[s.name] = truncated_product([table.p(s.name, t) for t in type_ids], tau)
    return table
