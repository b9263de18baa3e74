"""Outcome analysis on block difference-in-differences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .blocks import Block

EXACT_SIGNED_RANK_MAX = 20
EXACT_RANK_SUM_MAX = 10000


@dataclass(frozen=True)
class BlockDiD:
    block_id: int
    type_id: int
    value: float


def block_did(block: Block, outcomes: Dict[str, float]) -> BlockDiD:
    """Signed sum of the four outcomes, in weeks."""
    total = 0.0
    for m in block.members:
        y = outcomes.get(m.individual_id)
        if y is None or (isinstance(y, float) and math.isnan(y)):
            raise ValueError(f"block {block.block_id}: missing outcome for {m.individual_id}")
        total += m.sign * float(y)
    return BlockDiD(block.block_id, block.type_id, total)


# --- signed-rank sensitivity ---------------------------------------------------

@dataclass(frozen=True)
class SensitivityResult:
    gamma: float
    upper_p: float
    lower_p: float
    statistic: float
    method: str = "normal"


def _signed_rank_setup(values):
    d = np.asarray(values, dtype=float).reshape(-1)
    d = d[d != 0]
    if d.size == 0:
        return None, None, 0.0
    r = rankdata(np.abs(d))
    T = float(r[d > 0].sum())
    return d, r, T


def _exact_tail(r, T, prob):
    """P(sum of r_i * B_i >= T) with independent B_i ~ Bernoulli(prob).
    Ranks are mid-ranks, so work on the doubled (integer) scale."""
    r2 = np.round(2 * r).astype(int)
    t2 = int(round(2 * T))
    dist = np.zeros(int(r2.sum()) + 1)
    dist[0] = 1.0
    for v in r2:
        new = dist * (1.0 - prob)
        new[v:] += dist[:dist.size - v] * prob
        dist = new
    return float(min(1.0, dist[t2:].sum()))


def signed_rank_gamma(dids, gamma: float = 1.0, method: str = "auto") -> SensitivityResult:
    """Bounds on the one-sided p-value of Wilcoxon's signed-rank statistic
    when each block's sign may be positive with probability up to
    gamma/(1+gamma).

    ``method`` is ``"normal"`` (continuity-corrected approximation),
    ``"exact"`` (distribution of the bounding sum), or ``"auto"`` which is
    exact for at most 20 nonzero differences.  Zeros are dropped and tied
    absolute values get mid-ranks.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if method not in ("auto", "normal", "exact"):
        raise ValueError(f"unknown method {method!r}")
    d, r, T = _signed_rank_setup(dids)
    if d is None:
        return SensitivityResult(float(gamma), 1.0, 1.0, 0.0, "degenerate")
    use_exact = method == "exact" or (method == "auto" and d.size <= EXACT_SIGNED_RANK_MAX)
    hi = gamma / (1.0 + gamma)
    lo = 1.0 / (1.0 + gamma)
    if use_exact:
        return SensitivityResult(float(gamma), _exact_tail(r, T, hi), _exact_tail(r, T, lo), T, "exact")
    out = []
    for prob in (hi, lo):
        mean = prob * r.sum()
        var = prob * (1 - prob) * (r ** 2).sum()
        z = (T - mean - 0.5) / math.sqrt(var)
        out.append(float(norm.sf(z)))
    return SensitivityResult(float(gamma), out[0], out[1], T, "normal")


def sensitivity_table(dids, gammas: Sequence[float], method: str = "auto"):
    return [signed_rank_gamma(dids, g, method) for g in gammas]


def amplify(lambda_: float, delta: float) -> float:
    """Gamma matching an unobserved covariate that multiplies the odds of
    treatment by ``lambda_`` and of a positive difference by ``delta``."""
    if lambda_ < 1 or delta < 1:
        raise ValueError("lambda_ and delta must be >= 1")
    if math.isinf(lambda_) or math.isinf(delta):
        return float(delta if math.isinf(lambda_) else lambda_)
    return (lambda_ * delta + 1.0) / (lambda_ + delta)


# --- rank sum and Hodges-Lehmann -------------------------------------------------

def _rank_sum_exact_pmf(m, n):
    """Null distribution of the Mann-Whitney U statistic without ties."""
    # row[j] holds the counts for sizes (i, j); the largest value belongs
    # either to the first sample (shift by j) or to the second
    row = [np.ones(1) for _ in range(n + 1)]
    for i in range(1, m + 1):
        new = [np.ones(1)]
        for j in range(1, n + 1):
            a, b = row[j], new[j - 1]
            out = np.zeros(i * j + 1)
            out[j:j + a.size] += a
            out[:b.size] += b
            new.append(out)
        row = new
    counts = row[n]
    return counts / counts.sum()


def wilcoxon_hl(sample_a, sample_b, conf_level: float = 0.95):
    """Wilcoxon rank-sum test of A versus B with the Hodges-Lehmann shift.

    Returns a dict with ``p_two_sided``, ``hl_estimate`` (median of all
    A - B differences), ``ci`` (inversion of the rank-sum test), ``method``
    and the Mann-Whitney ``U``.  Exact null distribution when m*n <= 10^4
    and there are no ties; normal approximation with tie and continuity
    correction otherwise.
    """
    a = np.asarray(sample_a, dtype=float).reshape(-1)
    b = np.asarray(sample_b, dtype=float).reshape(-1)
    m, n = a.size, b.size
    if m == 0 or n == 0:
        raise ValueError("both samples must be nonempty")
    diffs = np.sort((a[:, None] - b[None, :]).reshape(-1))
    hl = float(np.median(diffs))
    ranks = rankdata(np.concatenate([a, b]))
    W = float(ranks[:m].sum())
    U = W - m * (m + 1) / 2.0
    ties = np.unique(np.concatenate([a, b]), return_counts=True)[1]
    has_ties = np.any(ties > 1)
    alpha = 1 - conf_level
    N = m * n
    if N <= EXACT_RANK_SUM_MAX and not has_ties:
        pmf = _rank_sum_exact_pmf(m, n)
        cdf = np.cumsum(pmf)
        u = int(round(U))
        p_lo = cdf[u]
        p_hi = 1.0 - (cdf[u - 1] if u > 0 else 0.0)
        p = float(min(1.0, 2 * min(p_lo, p_hi)))
        # order statistics qu and mn - qu + 1 (1-based), qu the alpha/2
        # quantile of U, as in R's wilcox.test
        qu = max(int(np.searchsorted(cdf, alpha / 2 - 1e-15)), 1)
        lower, upper = diffs[qu - 1], diffs[N - qu]
        method = "exact"
    else:
        mean = N / 2.0
        var = m * n / 12.0 * ((m + n + 1) - (ties ** 3 - ties).sum() / ((m + n) * (m + n - 1)))
        if var <= 0:
            p = 1.0
        else:
            z = (U - mean - 0.5 * np.sign(U - mean)) / math.sqrt(var)
            p = float(min(1.0, 2 * norm.sf(abs(z))))
        zq = norm.ppf(1 - alpha / 2)
        k = int(math.floor(mean - zq * math.sqrt(max(var, 0.0))))
        k = min(max(k, 0), N - 1)
        lower, upper = diffs[k], diffs[N - 1 - k]
        method = "normal"
    return {"p_two_sided": p, "hl_estimate": hl, "ci": [float(lower), float(upper)],
            "method": method, "U": U, "m": m, "n": n}


# --- summaries -------------------------------------------------------------------

def tail_transform(values, quantile: float = 0.8):
    """Leave |y| <= beta alone and pull larger values in by the p = -1 power
    transform sign(y) * (2 beta - beta^2/|y|), which matches value and
    slope at beta and stays within (-2 beta, 2 beta).  beta is the type-7
    ``quantile`` of |y|.  Returns (transformed, beta)."""
    y = np.asarray(values, dtype=float)
    if y.size == 0:
        raise ValueError("values must be nonempty")
    if not (0 < quantile < 1):
        raise ValueError("quantile must be in (0, 1)")
    beta = float(np.quantile(np.abs(y), quantile))
    return transform_with_beta(y, beta), beta


def transform_with_beta(values, beta: float):
    y = np.asarray(values, dtype=float)
    if beta <= 0:
        return y.copy()
    out = y.copy()
    big = np.abs(y) > beta
    out[big] = np.sign(y[big]) * (2 * beta - beta ** 2 / np.abs(y[big]))
    return out


def did_summary(dids, type_ids: Optional[Sequence[int]] = None):
    """Median, quartiles, deciles (type-7 quantiles) and counts."""
    v = np.asarray([d.value if isinstance(d, BlockDiD) else d for d in dids], dtype=float)
    if v.size == 0:
        raise ValueError("no values")
    q = np.quantile(v, [0.25, 0.5, 0.75])
    dec = np.quantile(v, np.arange(1, 10) / 10.0)
    out = {"count": int(v.size), "median": float(q[1]),
           "quartiles": [float(q[0]), float(q[2])],
           "deciles": [float(x) for x in dec]}
    if type_ids is None and dids and isinstance(dids[0], BlockDiD):
        type_ids = [d.type_id for d in dids]
    if type_ids is not None:
        counts: Dict[str, int] = {}
        for t in type_ids:
            counts[str(t)] = counts.get(str(t), 0) + 1
        out["per_type_count"] = dict(sorted(counts.items(), key=lambda kv: int(kv[0])))
    return out
