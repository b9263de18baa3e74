"""Individual records, treatment groups, the balance template and a
synthetic population generator shaped like the 1989 Austrian benefits
reform (two eligibility cuts crossed with before/after)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .design import GROUP_NAMES

ELIGIBILITY_COLUMNS = ("w_prime", "w_dprime", "w_tprime")

# (w', w'', w''') for groups 1..8
GROUP_SIGNS = {
    1: (1, 1, -1),
    2: (-1, 1, -1),
    3: (1, -1, -1),
    4: (-1, -1, -1),
    5: (1, 1, 1),
    6: (-1, 1, 1),
    7: (1, -1, 1),
    8: (-1, -1, 1),
}
_SIGNS_TO_GROUP = {v: k for k, v in GROUP_SIGNS.items()}


def derive_group(w_prime, w_dprime, w_tprime) -> int:
    """Map eligibility signs (LE, IU, TIME) to the group index 1..8."""
    key = []
    for name, v in zip(ELIGIBILITY_COLUMNS, (w_prime, w_dprime, w_tprime)):
        if v not in (1, -1):
            raise ValueError(f"{name} must be +1 or -1, got {v!r}")
        key.append(int(v))
    return _SIGNS_TO_GROUP[tuple(key)]


def cell_partner(g: int) -> int:
    """The group with the same LE/IU cell in the other period."""
    return g + 4 if g <= 4 else g - 4


@dataclass(frozen=True)
class IndividualRecord:
    id: str
    x: np.ndarray
    w_prime: int
    w_dprime: int
    w_tprime: int
    outcome: Optional[float] = None

    @property
    def group(self) -> int:
        return derive_group(self.w_prime, self.w_dprime, self.w_tprime)


@dataclass
class StudyPopulation:
    """Column-oriented storage of the individual records."""

    ids: List[str]
    X: np.ndarray
    w: np.ndarray  # (N, 3) of +/-1: LE, IU, TIME
    covariate_names: List[str]
    outcome: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.ids), -1)
        self.w = np.asarray(self.w, dtype=int).reshape(len(self.ids), 3)
        self.covariate_names = list(self.covariate_names)
        if self.X.shape[1] != len(self.covariate_names):
            raise ValueError("covariate dimension does not match covariate_names")
        if len(set(self.ids)) != len(self.ids):
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise ValueError(f"duplicate id {dup!r}")
        if not np.all(np.isin(self.w, (-1, 1))):
            raise ValueError("eligibility covariates must be +1 or -1")
        if self.outcome is not None:
            self.outcome = np.asarray(self.outcome, dtype=float).reshape(-1)
            if self.outcome.shape[0] != len(self.ids):
                raise ValueError("outcome length does not match ids")
        self.group = np.array(
            [_SIGNS_TO_GROUP[tuple(r)] for r in self.w.tolist()], dtype=int
        ).reshape(-1)
        self._index = {i: k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def index_of(self, ids) -> np.ndarray:
        return np.array([self._index[str(i)] for i in ids], dtype=int)

    def group_indices(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group == g)

    def group_counts(self) -> List[int]:
        return [int(np.sum(self.group == g)) for g in range(1, 9)]

    def covariate(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}") from None

    def record(self, i: int) -> IndividualRecord:
        out = None
        if self.outcome is not None and not math.isnan(self.outcome[i]):
            out = float(self.outcome[i])
        return IndividualRecord(self.ids[i], self.X[i].copy(), *map(int, self.w[i]), out)

    def records(self) -> List[IndividualRecord]:
        return [self.record(i) for i in range(len(self))]

    def with_covariates(self, X) -> "StudyPopulation":
        return StudyPopulation(list(self.ids), X, self.w.copy(), list(self.covariate_names),
                               None if self.outcome is None else self.outcome.copy())

    def subset(self, index) -> "StudyPopulation":
        index = np.asarray(index, dtype=int)
        return StudyPopulation(
            [self.ids[i] for i in index], self.X[index], self.w[index],
            list(self.covariate_names),
            None if self.outcome is None else self.outcome[index],
        )


@dataclass(frozen=True)
class PopulationSchema:
    """Column names of a population CSV.

    ``zero_one`` recodes eligibility columns written as 0/1 to -1/+1; it is
    never applied unless asked for.
    """

    id_column: str = "id"
    w_columns: tuple = ELIGIBILITY_COLUMNS
    outcome_column: str = "outcome"
    covariates: Optional[tuple] = None
    zero_one: bool = False


def load_population(path, schema: Optional[PopulationSchema] = None) -> StudyPopulation:
    schema = schema or PopulationSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    required = [schema.id_column, *schema.w_columns]
    missing = [c for c in required if c not in header]
    if schema.covariates is not None:
        missing += [c for c in schema.covariates if c not in header]
    if missing:
        raise ValueError(f"{path}: missing column(s) {missing}")
    reserved = set(required) | {schema.outcome_column, "group"}
    covs = list(schema.covariates) if schema.covariates is not None else [
        c for c in header if c not in reserved
    ]
    pos = {c: header.index(c) for c in header}
    has_outcome = schema.outcome_column in pos

    ids, X, W, Y = [], [], [], []
    for r, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        ids.append(row[pos[schema.id_column]])
        w = []
        for c in schema.w_columns:
            w.append(_parse_sign(row[pos[c]], schema.zero_one, path, r, c))
        W.append(w)
        x = []
        for c in covs:
            try:
                v = float(row[pos[c]])
            except ValueError:
                raise ValueError(f"{path}: row {r}, column {c!r}: non-numeric value {row[pos[c]]!r}") from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: row {r}, column {c!r}: non-finite value")
            x.append(v)
        X.append(x)
        if has_outcome:
            raw = row[pos[schema.outcome_column]].strip()
            if raw == "":
                Y.append(math.nan)
            else:
                try:
                    Y.append(float(raw))
                except ValueError:
                    raise ValueError(f"{path}: row {r}, column {schema.outcome_column!r}: non-numeric value {raw!r}") from None
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValueError(f"{path}: duplicate id {dup!r}")
    outcome = None
    if has_outcome and Y and not all(math.isnan(y) for y in Y):
        outcome = np.array(Y)
    X = np.array(X, dtype=float).reshape(len(ids), len(covs))
    return StudyPopulation(ids, X, np.array(W, dtype=int).reshape(len(ids), 3), covs, outcome)


def _parse_sign(raw, zero_one, path, r, c):
    try:
        v = float(raw)
    except ValueError:
        raise ValueError(f"{path}: row {r}, column {c!r}: non-numeric value {raw!r}") from None
    if zero_one:
        if v in (0.0, 1.0):
            return 1 if v == 1.0 else -1
        raise ValueError(f"{path}: row {r}, column {c!r}: expected 0 or 1, got {raw!r}")
    if v not in (1.0, -1.0):
        raise ValueError(f"{path}: row {r}, column {c!r}: expected -1 or +1, got {raw!r}")
    return int(v)


def _num(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return ""
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def save_population(pop: StudyPopulation, path) -> None:
    """Write the population CSV with a trailing derived ``group`` column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *ELIGIBILITY_COLUMNS, "outcome", *pop.covariate_names, "group"])
        for i in range(len(pop)):
            out = "" if pop.outcome is None else _num(pop.outcome[i])
            writer.writerow(
                [pop.ids[i], *map(str, pop.w[i].tolist()), out,
                 *(_num(v) for v in pop.X[i]), str(pop.group[i])]
            )


@dataclass
class Template:
    """Target covariate means and the scales used to standardize."""

    means: np.ndarray
    scales: np.ndarray
    covariate_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        if self.means.shape != self.scales.shape:
            raise ValueError("means and scales differ in length")
        if np.any(~(self.scales > 0)):
            bad = [self.covariate_names[k] if self.covariate_names else k
                   for k in np.flatnonzero(~(self.scales > 0))]
            raise ValueError(f"template scales must be positive; zero for {bad}")

    def to_dict(self):
        return {
            "covariates": list(self.covariate_names),
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
        }


def group_means(pop: StudyPopulation) -> np.ndarray:
    """(8, K) matrix of covariate means by group; raises on an empty group."""
    counts = pop.group_counts()
    empty = [GROUP_NAMES[g] for g in range(8) if counts[g] == 0]
    if empty:
        raise ValueError(f"empty treatment group(s): {empty}")
    return np.vstack([pop.X[pop.group == g].mean(axis=0) for g in range(1, 9)])


def build_template(pop: StudyPopulation) -> Template:
    """Template means are the unweighted average of the eight group means;
    scales are pooled standard deviations."""
    means = group_means(pop).mean(axis=0)
    scales = pop.X.std(axis=0)
    return Template(means, scales, list(pop.covariate_names))


def standardize(pop: StudyPopulation, template: Template) -> StudyPopulation:
    if template.means.shape[0] != pop.n_covariates:
        raise ValueError("template and population differ in covariate count")
    if np.any(template.scales == 0):
        raise ValueError("cannot standardize with a zero scale")
    return pop.with_covariates((pop.X - template.means) / template.scales)


# --- synthetic populations --------------------------------------------------

DEFAULT_COVARIATES = [
    "temporary_layoff", "female", "age", "secondary_edu", "tertiary_edu",
    "apprenticeship", "married", "single", "divorced", "female_married",
    "female_single", "female_divorced", "blue_collar", "seasonal",
    "manufacturing", "prior_wage", "low_earnings", "rel_employment",
    "infrequent_unemp", "worked_3of5", "age_ge_50",
]

# Covariates whose distribution is fixed by the LE/IU cell: they can only be
# balanced between the before and after groups of the same cell.
CELL_COVARIATES = ["prior_wage", "low_earnings", "rel_employment", "infrequent_unemp"]

_BINARY_RATES = {
    "temporary_layoff": 0.32, "secondary_edu": 0.05, "tertiary_edu": 0.04,
    "apprenticeship": 0.28, "blue_collar": 0.75, "seasonal": 0.40,
    "manufacturing": 0.16, "worked_3of5": 0.65,
}


@dataclass
class SynthConfig:
    """Parameters of the synthetic population.

    ``xi`` and ``eta`` give the outcome components that may depend on
    (x, LE, IU) and (x, LE, TIME) respectively, as dicts from term to
    coefficient.  A term is ``"1"``, a covariate name, an eligibility symbol
    (``LE``, ``IU``, ``TIME``) or a ``*`` product of those, with covariates
    entering centred at their overall mean.  ``tau`` is the effect of longer
    benefits in the BR group and ``tau_low`` (default ``tau``) in Br.
    ``iu_time_effect`` adds a term in IU x TIME, which no difference in
    differences here can remove in block types 2 to 5.
    """

    seed: int
    group_sizes: List[int] = field(default_factory=lambda: [1000] * 8)
    wage_cut: float = 12610.0
    re_cut: float = 0.40
    tau: float = 5.0
    tau_low: Optional[float] = None
    noise: float = 1.0
    xi: Dict[str, float] = field(default_factory=lambda: {
        "1": 20.0, "age": 0.3, "female": 1.0, "LE": 1.5, "IU": -1.0,
        "LE*IU": 0.5, "age*IU": 0.2,
    })
    eta: Dict[str, float] = field(default_factory=lambda: {
        "TIME": 1.0, "LE*TIME": 0.8, "age*TIME": 0.1,
    })
    iu_time_effect: float = 0.0
    group_shift: float = 0.05
    benefits: Dict[str, List[float]] = field(default_factory=lambda: {
        # months of benefits before -> after, by age>=50 and worked 3 of 5
        "BR": [20, 39, 30, 39, 20, 52, 30, 52],
        "Br": [20, 39, 30, 39, 20, 52, 30, 52],
        "bR": [20, 20, 30, 30, 20, 20, 30, 30],
        "br": [20, 20, 30, 30, 20, 20, 30, 30],
    })

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if len(self.group_sizes) != 8 or any(int(n) < 1 for n in self.group_sizes):
            raise ValueError("group_sizes must be 8 positive integers")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        for term in self.xi:
            if "TIME" in term.split("*"):
                raise ValueError(f"xi term {term!r} may not involve TIME")
        for term in self.eta:
            if "IU" in term.split("*"):
                raise ValueError(f"eta term {term!r} may not involve IU")

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        if "seed" not in d:
            raise ValueError("synth config: seed is mandatory")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"synth config: unknown field(s) {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


def _draw_group(rng, n, g, cfg: SynthConfig, shift):
    le, iu, _ = GROUP_SIGNS[g]
    cols = {}
    # Prior wage: lognormal around 14500 shillings, truncated to the LE side.
    wage = np.empty(n)
    filled = 0
    while filled < n:
        cand = np.exp(rng.normal(math.log(14000.0), 0.35, size=2 * (n - filled) + 16))
        ok = cand <= cfg.wage_cut if le == 1 else cand > cfg.wage_cut
        cand = cand[ok][: n - filled]
        wage[filled: filled + cand.size] = cand
        filled += cand.size
    wage = np.round(wage, 2)
    # rounding must not carry a value across the cut
    if le == 1:
        wage = np.minimum(wage, cfg.wage_cut)
    else:
        wage = np.maximum(wage, np.round(cfg.wage_cut + 0.01, 2))
    cols["prior_wage"] = wage
    cols["low_earnings"] = (cols["prior_wage"] <= cfg.wage_cut).astype(float)
    if iu == 1:
        re = rng.uniform(cfg.re_cut, 1.0, size=n)
    else:
        re = rng.uniform(0.0, cfg.re_cut, size=n)
    re = np.round(re, 4)
    if iu == 1:
        re = np.maximum(re, cfg.re_cut)
    else:
        re = np.minimum(re, np.round(cfg.re_cut - 1e-4, 4))
    cols["rel_employment"] = re
    cols["infrequent_unemp"] = (cols["rel_employment"] >= cfg.re_cut).astype(float)

    age = np.clip(np.round(rng.normal(46.3 + 2.0 * shift[0], 4.5, size=n)), 40, 55)
    cols["age"] = age
    cols["age_ge_50"] = (age >= 50).astype(float)
    cols["female"] = (rng.random(n) < 0.55 + shift[1]).astype(float)
    u = rng.random(n)
    married = u < 0.68 + shift[2]
    single = (~married) & (u < 0.81 + shift[2])
    divorced = (~married) & (~single) & (u < 0.96)
    cols["married"] = married.astype(float)
    cols["single"] = single.astype(float)
    cols["divorced"] = divorced.astype(float)
    cols["female_married"] = cols["female"] * cols["married"]
    cols["female_single"] = cols["female"] * cols["single"]
    cols["female_divorced"] = cols["female"] * cols["divorced"]
    for k, (name, rate) in enumerate(_BINARY_RATES.items()):
        p = min(max(rate + shift[3 + k] * rate, 0.0), 1.0)
        cols[name] = (rng.random(n) < p).astype(float)
    return cols


def _term_value(term, X, names, centers, w):
    out = np.ones(X.shape[0])
    for factor in term.split("*"):
        factor = factor.strip()
        if factor == "1":
            continue
        if factor in ("LE", "IU", "TIME"):
            out = out * w[:, ("LE", "IU", "TIME").index(factor)]
        elif factor in names:
            k = names.index(factor)
            out = out * (X[:, k] - centers[k])
        else:
            raise ValueError(f"unknown outcome-model factor {factor!r}")
    return out


def outcome_components(pop: StudyPopulation, cfg: SynthConfig, centers=None):
    """Return (xi, eta) evaluated for every record."""
    centers = pop.X.mean(axis=0) if centers is None else centers
    xi = np.zeros(len(pop))
    for term, coef in cfg.xi.items():
        xi += coef * _term_value(term, pop.X, pop.covariate_names, centers, pop.w)
    eta = np.zeros(len(pop))
    for term, coef in cfg.eta.items():
        eta += coef * _term_value(term, pop.X, pop.covariate_names, centers, pop.w)
    return xi, eta


def synthesize_population(cfg: SynthConfig) -> StudyPopulation:
    """Draw a population with the given group sizes.

    Eligibility follows the cuts (LE: prior wage <= wage_cut, IU: relative
    employment >= re_cut) and every record's covariates are generated
    conditional on its group, with small group-specific shifts of size
    ``group_shift``.  Outcomes are xi + eta + the benefit-duration effect +
    Gaussian noise, floored at zero weeks.
    """
    rng = np.random.default_rng(cfg.seed)
    blocks, W, ids = [], [], []
    n_shift = 3 + len(_BINARY_RATES)
    for g in range(1, 9):
        n = int(cfg.group_sizes[g - 1])
        shift = cfg.group_shift * rng.uniform(-1, 1, size=n_shift)
        cols = _draw_group(rng, n, g, cfg, shift)
        blocks.append(np.column_stack([cols[c] for c in DEFAULT_COVARIATES]))
        W.append(np.tile(GROUP_SIGNS[g], (n, 1)))
        ids.extend(f"{GROUP_NAMES[g - 1]}-{i + 1:05d}" for i in range(n))
    X = np.vstack(blocks)
    W = np.vstack(W)
    pop = StudyPopulation(ids, X, W, list(DEFAULT_COVARIATES))
    xi, eta = outcome_components(pop, cfg)
    tau_low = cfg.tau if cfg.tau_low is None else cfg.tau_low
    effect = np.where(pop.group == 5, cfg.tau, 0.0) + np.where(pop.group == 6, tau_low, 0.0)
    alias = cfg.iu_time_effect * W[:, 1] * W[:, 2]
    noise = rng.normal(0.0, 1.0, size=len(pop)) * cfg.noise
    y = np.maximum(xi + eta + effect + alias + noise, 0.0)
    pop.outcome = np.round(y, 6) if cfg.noise > 0 else y
    return pop
