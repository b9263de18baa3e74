"""Group-level design matrices, estimability and alias structure.

A design matrix here has one row per treatment group and one named column
per effect.  Replication (individuals per group) never changes the row
space, so estimability and aliasing are decided at the group level; only
the least-squares weights depend on the replication counts.
"""

from __future__ import annotations

import csv
import io
import itertools
import string
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

RANK_RTOL = 1e-9
ALIAS_TOL = 1e-9
CONTRAST_SUM_TOL = 1e-12


@dataclass
class DesignMatrix:
    """Named effect columns over ``G`` treatment groups."""

    group_labels: List[str]
    columns: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.group_labels = [str(g) for g in self.group_labels]
        cols = {}
        for name, col in self.columns.items():
            cols[str(name)] = self._check_column(name, col)
        self.columns = cols

    def _check_column(self, name, col):
        col = np.asarray(col, dtype=float).reshape(-1)
        if col.shape[0] != len(self.group_labels):
            raise ValueError(
                f"column {name!r} has {col.shape[0]} entries, expected {len(self.group_labels)}"
            )
        if name == "intercept" and not np.all(col == 1.0):
            raise ValueError("an 'intercept' column must be all ones")
        return col

    @property
    def n_groups(self) -> int:
        return len(self.group_labels)

    @property
    def names(self) -> List[str]:
        return list(self.columns)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise KeyError(f"unknown effect {name!r}; have {self.names}") from None

    def matrix(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        names = self.names if names is None else list(names)
        if not names:
            return np.zeros((self.n_groups, 0))
        return np.column_stack([self.column(n) for n in names])

    def with_column(self, name: str, values) -> "DesignMatrix":
        """Return a copy with one more column appended."""
        if name in self.columns:
            raise ValueError(f"duplicate effect name {name!r}")
        cols = dict(self.columns)
        cols[name] = values
        return DesignMatrix(list(self.group_labels), cols)

    def subset_rows(self, labels: Sequence[str]) -> "DesignMatrix":
        idx = [self.group_labels.index(str(g)) for g in labels]
        return DesignMatrix(
            [self.group_labels[i] for i in idx],
            {n: c[idx] for n, c in self.columns.items()},
        )

    # -- CSV layout: first column is the group label, then one column per effect

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group"] + self.names)
        for g, label in enumerate(self.group_labels):
            writer.writerow([label] + [_fmt(self.columns[n][g]) for n in self.names])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "DesignMatrix":
        text = _read_text(path_or_text)
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty design CSV")
        header, body = rows[0], rows[1:]
        names = header[1:]
        if len(set(names)) != len(names):
            raise ValueError("effect names must be unique")
        labels = [r[0] for r in body]
        cols = {n: np.array([float(r[j + 1]) for r in body]) for j, n in enumerate(names)}
        return cls(labels, cols)


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def _read_text(path_or_text) -> str:
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        return path_or_text
    with open(path_or_text, newline="") as fh:
        return fh.read()


@dataclass(frozen=True)
class Contrast:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not np.any(w != 0):
            raise ValueError("a contrast needs at least one nonzero weight")
        if abs(w.sum()) > CONTRAST_SUM_TOL * max(1.0, np.abs(w).sum()):
            raise ValueError(f"contrast weights sum to {w.sum():g}, not zero")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.shape[0]

    def proportional_to(self, other, tol: float = 1e-9) -> bool:
        a = self.weights
        b = np.asarray(getattr(other, "weights", other), dtype=float)
        k = np.dot(a, b) / np.dot(b, b)
        return bool(np.allclose(a, k * b, atol=tol, rtol=0))


@dataclass
class AliasReport:
    """Outcome of an estimability check.

    ``contrast`` holds the least-squares weights on the group means when the
    target is estimable.  It is ``None`` when the target is not estimable or
    when the estimable weights do not sum to zero (targets involving the
    intercept); ``weights`` carries the raw vector either way.
    """

    estimable: bool
    contrast: Optional[Contrast]
    dependencies: List[Dict[str, float]]
    weights: Optional[np.ndarray] = None


def _rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > RANK_RTOL * sv[0]))


def full_factorial(k: int) -> DesignMatrix:
    """Two-level full factorial in standard order, first factor slowest.

    Rows follow the layout of a textbook ``2^k`` table: row 1 is all ``+1``
    and the last row all ``-1``.  Columns are named ``A``, ``B``, ...
    """
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= 20:
        raise ValueError(f"k must be an integer in [1, 20], got {k!r}")
    rows = np.array(list(itertools.product([1.0, -1.0], repeat=int(k))))
    names = string.ascii_uppercase[:k]
    labels = [str(i + 1) for i in range(rows.shape[0])]
    return DesignMatrix(labels, {n: rows[:, j] for j, n in enumerate(names)})


def interaction_column(design: DesignMatrix, effect_names: Sequence[str]) -> np.ndarray:
    """Elementwise product of the named columns."""
    if len(effect_names) == 0:
        raise ValueError("need at least one effect name")
    out = np.ones(design.n_groups)
    for name in effect_names:
        out = out * design.column(name)
    return out


def effect_target(design: DesignMatrix, name: str) -> np.ndarray:
    """Coefficient vector for the factorial effect of one column.

    The effect is the change in mean response from the low to the high level
    of the column, so a +/-1 coded column gets coefficient 2.
    """
    col = design.column(name)
    target = np.zeros(len(design.names))
    target[design.names.index(name)] = col.max() - col.min()
    return target


def _expand_target(design, target):
    if isinstance(target, str):
        t = np.zeros(len(design.names))
        t[design.names.index(target)] = 1.0
        return t
    if isinstance(target, dict):
        t = np.zeros(len(design.names))
        for name, coef in target.items():
            t[design.names.index(name)] = coef
        return t
    t = np.asarray(target, dtype=float).reshape(-1)
    if t.shape[0] != len(design.names):
        raise ValueError(
            f"target has {t.shape[0]} coefficients but design has {len(design.names)} columns"
        )
    return t


def is_estimable(design: DesignMatrix, target, method: str = "projection") -> bool:
    """Whether ``target . beta`` is estimable (target in the row space).

    ``method="projection"`` projects the target onto the row space;
    ``method="rank"`` appends the target as a row and compares ranks.
    """
    X = design.matrix()
    t = _expand_target(design, target)
    if method == "rank":
        return _rank(np.vstack([X, t])) == _rank(X)
    if method != "projection":
        raise ValueError(f"unknown method {method!r}")
    if not np.any(t):
        return True
    # row space of X = column space of X^T
    U, sv, _ = np.linalg.svd(X.T, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return False
    basis = U[:, sv > RANK_RTOL * sv[0]]
    resid = t - basis @ (basis.T @ t)
    return bool(np.linalg.norm(resid) <= RANK_RTOL * max(1.0, np.linalg.norm(t)) * 10)


def estimable_contrast(design: DesignMatrix, target, replication=None) -> AliasReport:
    """Decide estimability of ``target . beta`` and give its LS weights.

    Parameters
    ----------
    design : DesignMatrix
    target : array-like, str or dict
        Coefficients over the design columns (a column name means that
        column's coefficient alone).
    replication : array-like of int, optional
        Number of individuals per group.  The weights returned apply to the
        group means, i.e. each is the per-individual weight times the group
        size.  Balanced replication is assumed when omitted.
    """
    X = design.matrix()
    t = _expand_target(design, target)
    if replication is None:
        n = np.ones(design.n_groups)
    else:
        n = np.asarray(replication, dtype=float).reshape(-1)
        if n.shape[0] != design.n_groups:
            raise ValueError("replication must give one count per group")
        if np.any(n < 1) or np.any(n != np.round(n)):
            raise ValueError("replication counts must be positive integers")
    deps = alias_relations(design)
    if not is_estimable(design, t):
        return AliasReport(False, None, deps, None)
    XtNX = X.T @ (n[:, None] * X)
    weights = n * (X @ (np.linalg.pinv(XtNX, rcond=RANK_RTOL) @ t))
    weights = _snap_rational(weights)
    contrast = None
    if np.any(weights) and abs(weights.sum()) <= 1e-10 * max(1.0, np.abs(weights).sum()):
        weights = weights - weights.mean()  # clear float residue so Contrast accepts it
        contrast = Contrast(weights)
    return AliasReport(True, contrast, deps, weights)


def _snap_rational(values, max_denominator: int = 10**6, tol: float = 1e-12) -> np.ndarray:
    # integer-coded designs give rational weights; drop the float residue
    out = np.array(values, dtype=float)
    for i, v in enumerate(out):
        f = Fraction(float(v)).limit_denominator(max_denominator)
        if abs(float(f) - v) <= tol * max(1.0, abs(v)):
            out[i] = float(f)
    return out


def alias_relations(design: DesignMatrix) -> List[Dict[str, float]]:
    """Basis of the linear dependencies among the design columns.

    Columns are scanned left to right; each column lying in the span of the
    independent columns before it yields one relation, written as that
    column minus its expansion.  Relations are listed latest column first.
    """
    names = design.names
    if not names:
        raise ValueError("design has no columns")
    independent: List[int] = []
    relations = []
    for j, name in enumerate(names):
        col = design.column(name)
        if independent:
            B = design.matrix([names[i] for i in independent])
            dependent = _rank(np.column_stack([B, col])) == len(independent)
        else:
            B = None
            dependent = not np.any(col)
        if not dependent:
            independent.append(j)
            continue
        rel = {name: 1.0}
        if B is not None:
            coef, *_ = np.linalg.lstsq(B, col, rcond=None)
            for i, c in zip(independent, coef):
                c = float(c)
                if abs(c) > 1e-12:
                    rc = round(c)
                    rel[names[i]] = -(float(rc) if abs(c - rc) < 1e-12 else c)
        relations.append((j, rel))
    relations.sort(key=lambda item: -item[0])
    return [rel for _, rel in relations]


def evaluate_relation(design: DesignMatrix, relation: Dict[str, float]) -> np.ndarray:
    out = np.zeros(design.n_groups)
    for name, coef in relation.items():
        out += coef * design.column(name)
    return out


def contrast_orthogonality(h, zeta, tol: float = ALIAS_TOL):
    """Return ``(sum_g h_g * zeta_g, aliased)``.

    ``aliased`` is true when the sum is not zero within ``tol`` (scaled by the
    magnitudes involved so that raw covariate units do not matter).
    """
    w = np.asarray(getattr(h, "weights", h), dtype=float).reshape(-1)
    z = np.asarray(zeta, dtype=float).reshape(-1)
    if w.shape != z.shape:
        raise ValueError(f"contrast has {w.shape[0]} groups, zeta has {z.shape[0]}")
    value = float(np.dot(w, z))
    scale = max(1.0, float(np.dot(np.abs(w), np.abs(z))))
    return value, abs(value) > tol * scale


# --- the designs used in the unemployment-benefits study -------------------

GROUP_NAMES = ["BR_bar", "Br_bar", "bR_bar", "br_bar", "BR", "Br", "bR", "br"]

# h for the benefit-duration (B/b) effect, one weight per group above
BENEFIT_DURATION_H = np.array([-1, -1, 1, 1, 1, 1, -1, -1]) / 4.0


def benefits_design() -> DesignMatrix:
    """Eight-group design: intercept, B/b, R/r, LE, IU and TIME."""
    le = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
    iu = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float)
    time = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=float)
    after = (time + 1) / 2
    return DesignMatrix(
        list(GROUP_NAMES),
        {
            "intercept": np.ones(8),
            "B/b": iu * after,
            "R/r": le * after,
            "LE": le,
            "IU": iu,
            "TIME": time,
        },
    )


def did_design(treatment_coding: str = "table") -> DesignMatrix:
    """Four-cell difference-in-differences design.

    ``treatment_coding`` selects the Treatment column: ``"table"`` gives
    ``(0, 0, -1, 1)``, ``"indicator"`` gives ``(0, 0, 0, 1)`` and ``"sign"``
    gives ``(-1, -1, -1, 1)``.
    """
    codings = {
        "table": [0, 0, -1, 1],
        "indicator": [0, 0, 0, 1],
        "sign": [-1, -1, -1, 1],
    }
    if treatment_coding not in codings:
        raise ValueError(f"unknown coding {treatment_coding!r}")
    return DesignMatrix(
        ["ineligible_before", "eligible_before", "ineligible_after", "eligible_after"],
        {
            "intercept": np.ones(4),
            "eligible": np.array([-1, 1, -1, 1.0]),
            "time": np.array([-1, -1, 1, 1.0]),
            "treatment": np.array(codings[treatment_coding], dtype=float),
        },
    )
