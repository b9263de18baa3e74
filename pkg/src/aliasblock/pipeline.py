"""End-to-end orchestration: population -> template -> Steps 1-2 -> Step 3
-> balance -> outcomes, with deterministic file outputs."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import balance as bal
from . import inference as inf
from .blocks import (BlockDesign, aliased_covariates, assemble_design, check_design,
                     default_plan, sample_allocation)
from .design import GROUP_NAMES
from .partition import (InfeasibleMatching, PartitionProblem, check_partition,
                        run_steps_1_2)
from .population import (CELL_COVARIATES, PopulationSchema, StudyPopulation, SynthConfig,
                         build_template, cell_partner, group_means, load_population,
                         save_population, standardize, synthesize_population)

ARTIFACTS = ["population.csv", "solver_log.json", "design.csv", "balance.csv",
             "balance.json", "outcomes.json"]
DEFAULT_GAMMAS = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5, 3.0]

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_INVALID = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, message, code):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


@dataclass
class PipelineConfig:
    """Everything a run needs; ``seed`` is mandatory.

    ``cell_covariates`` lists covariates whose distribution is tied to the
    LE/IU cell (default: those of the synthetic generator present in the
    data).  Their balance target in each group is the mean of that cell's
    before and after groups instead of the template mean.
    """

    seed: int
    output_dir: str = "out"
    input: Optional[str] = None
    zero_one: bool = False
    synth: Optional[dict] = None
    epsilon: float = 0.05
    epsilons: Dict[str, float] = field(default_factory=dict)
    P: int = 3
    cell_covariates: Optional[List[str]] = None
    step2_mode: str = "feasibility"
    node_limit: int = 200000
    features: Optional[List[str]] = None
    draws: int = 10000
    truncation: float = 0.2
    gammas: List[float] = field(default_factory=lambda: list(DEFAULT_GAMMAS))
    analysis_types: List[int] = field(default_factory=lambda: [2, 5])
    tail_quantile: float = 0.8
    threads: int = 1

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if (self.input is None) == (self.synth is None):
            raise ConfigError("give exactly one of 'input' and 'synth'")
        if not self.epsilon > 0 or any(not v > 0 for v in self.epsilons.values()):
            raise ConfigError("epsilons must be positive")
        if self.P != 3:
            # the six-type plan puts every group in exactly three types
            raise ConfigError("the default block plan needs P = 3")
        if self.step2_mode not in ("feasibility", "min_total_epsilon"):
            raise ConfigError(f"unknown step2_mode {self.step2_mode!r}")
        if self.draws < 1000:
            raise ConfigError("draws must be >= 1000")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @classmethod
    def from_dict(cls, d) -> "PipelineConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("seed is mandatory")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self):
        return asdict(self)


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


# --- stages ----------------------------------------------------------------------

def obtain_population(cfg: PipelineConfig) -> StudyPopulation:
    if cfg.synth is not None:
        synth = dict(cfg.synth)
        synth.setdefault("seed", cfg.seed)
        try:
            return synthesize_population(SynthConfig.from_dict(synth))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth config: {exc}") from None
    try:
        return load_population(cfg.input, PopulationSchema(zero_one=cfg.zero_one))
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class Targets:
    template_means: np.ndarray
    template_scales: np.ndarray
    standardized: np.ndarray  # (8, K) per-group targets on the standardized scale
    raw: np.ndarray  # the same in raw units
    epsilons: np.ndarray
    cell_covariates: List[str]


def balance_targets(pop: StudyPopulation, cfg: PipelineConfig) -> Targets:
    try:
        template = build_template(pop)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    z = standardize(pop, template)
    gm = group_means(z)
    names = pop.covariate_names
    cells = cfg.cell_covariates
    if cells is None:
        cells = [c for c in CELL_COVARIATES if c in names]
    missing = [c for c in cells if c not in names]
    if missing:
        raise ConfigError(f"unknown cell covariate(s) {missing}")
    T = np.tile(gm.mean(axis=0), (8, 1))
    for c in cells:
        k = names.index(c)
        for g in range(1, 9):
            T[g - 1, k] = 0.5 * (gm[g - 1, k] + gm[cell_partner(g) - 1, k])
    unknown = set(cfg.epsilons) - set(names)
    if unknown:
        raise ConfigError(f"epsilon given for unknown covariate(s) {sorted(unknown)}")
    eps = np.array([cfg.epsilons.get(c, cfg.epsilon) for c in names], dtype=float)
    raw = T * template.scales + template.means
    return Targets(template.means, template.scales, T, raw, eps, list(cells))


@dataclass
class MatchResult:
    s_bar: int
    samples: Dict[int, List[np.ndarray]]  # group -> P arrays of population rows
    log: dict


def match_stage(pop: StudyPopulation, targets: Targets, cfg: PipelineConfig) -> MatchResult:
    z = (pop.X - targets.template_means) / targets.template_scales
    problems, rows = [], []
    for g in range(1, 9):
        idx = pop.group_indices(g)
        if idx.size < cfg.P:
            raise StageError("match", f"group {GROUP_NAMES[g - 1]} has {idx.size} records, "
                             f"fewer than P={cfg.P}", EXIT_INFEASIBLE)
        rows.append(idx)
        problems.append(PartitionProblem(z[idx], targets.standardized[g - 1], targets.epsilons,
                                         cfg.P, covariate_names=list(pop.covariate_names),
                                         label=GROUP_NAMES[g - 1]))
    try:
        res = run_steps_1_2(problems, cfg.step2_mode, cfg.node_limit, cfg.threads)
    except InfeasibleMatching as exc:
        raise StageError("match", str(exc), EXIT_INFEASIBLE) from None
    if res.s_bar == 0:
        worst = [GROUP_NAMES[i] for i, s in enumerate(res.step1) if s.s == 0]
        raise StageError("match", f"common sample size is 0 (groups {worst})", EXIT_INFEASIBLE)
    samples = {}
    groups_log = []
    for g, (idx, s1, s2) in enumerate(zip(rows, res.step1, res.step2), start=1):
        samples[g] = [idx[part] for part in s2.samples()]
        groups_log.append({
            "group": g,
            "name": GROUP_NAMES[g - 1],
            "size": int(idx.size),
            "step1": {k: v for k, v in s1.to_dict().items() if k != "assignment"},
            "step2": s2.to_dict(),
            "sample_ids": [[pop.ids[i] for i in s] for s in samples[g]],
            "targets": targets.standardized[g - 1].tolist(),
        })
    log = {
        "s_bar": int(res.s_bar),
        "P": cfg.P,
        "step2_mode": cfg.step2_mode,
        "covariates": list(pop.covariate_names),
        "cell_covariates": targets.cell_covariates,
        "epsilons": targets.epsilons.tolist(),
        "template": {"means": targets.template_means.tolist(),
                     "scales": targets.template_scales.tolist()},
        "groups": groups_log,
    }
    return MatchResult(res.s_bar, samples, log)


def assemble_stage(pop: StudyPopulation, targets: Targets, match: MatchResult,
                   cfg: PipelineConfig) -> BlockDesign:
    z = (pop.X - targets.template_means) / targets.template_scales
    plan = default_plan()
    design = assemble_design(z, pop.ids, match.samples, plan,
                             group_targets=targets.standardized, threads=cfg.threads)
    errs = check_design(design, plan, match.s_bar)
    if errs:
        raise StageError("assemble", "; ".join(errs[:5]), EXIT_INVALID)
    match.log["step3"] = {
        "pinv_fallback": {str(k): v for k, v in sorted(design.pinv_used.items())},
        "excluded_from_pair_distance": {
            str(pl.type_id): [pop.covariate_names[k]
                              for k in aliased_covariates(pl, targets.standardized)]
            for pl in plan
        },
    }
    return design


def balance_stage(pop, design, targets: Targets, cfg: PipelineConfig):
    features = cfg.features if cfg.features is not None else bal.default_features(pop.covariate_names)
    try:
        return bal.balance_table(design, pop, features, cfg.draws, cfg.seed, cfg.truncation,
                                 group_targets=targets.raw, threads=cfg.threads)
    except ValueError as exc:
        raise ConfigError(f"balance features: {exc}") from None


def outcome_stage(pop: StudyPopulation, design: BlockDesign, cfg: PipelineConfig) -> dict:
    if pop.outcome is None:
        return {"available": False}
    outcomes = {i: float(y) for i, y in zip(pop.ids, pop.outcome)}
    dids = [inf.block_did(b, outcomes) for b in design.blocks]
    per_type = {}
    for t in sorted({d.type_id for d in dids}):
        vals = [d.value for d in dids if d.type_id == t]
        per_type[str(t)] = {"dids": vals, "summary": inf.did_summary(vals)}
    chosen = [d for d in dids if d.type_id in cfg.analysis_types]
    values = np.array([d.value for d in chosen])
    out = {"available": True, "per_type": per_type, "analysis_types": list(cfg.analysis_types)}
    if values.size:
        transformed, beta = inf.tail_transform(values, cfg.tail_quantile)
        out["pooled"] = inf.did_summary(chosen)
        out["tail_transform"] = {"quantile": cfg.tail_quantile, "beta": beta,
                                 "summary": inf.did_summary(list(transformed))}
        out["sensitivity"] = [asdict(r) for r in inf.sensitivity_table(values, cfg.gammas)]
        out["amplification"] = [
            {"gamma": g, "lambda": lam, "delta": (g * lam - 1) / (lam - g)}
            for g in cfg.gammas if g > 1 for lam in (2.0, 3.0) if lam > g
        ]
    if "2" in per_type and "5" in per_type:
        out["comparison_2_vs_5"] = inf.wilcoxon_hl(per_type["2"]["dids"], per_type["5"]["dids"])
    return out


# --- driver ----------------------------------------------------------------------

def _cleanup(out_dir):
    for name in ARTIFACTS:
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            os.remove(path)


def execute(cfg: PipelineConfig, log=print) -> dict:
    """Run every stage and write the artifacts; raises on failure."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    pop = obtain_population(cfg)
    save_population(pop, os.path.join(cfg.output_dir, "population.csv"))
    targets = balance_targets(pop, cfg)
    match = match_stage(pop, targets, cfg)
    log(f"matching: s_bar = {match.s_bar}")
    design = assemble_stage(pop, targets, match, cfg)
    log(f"assembled {len(design.blocks)} blocks")
    design.to_csv(os.path.join(cfg.output_dir, "design.csv"))
    match.log["config"] = cfg.to_dict()
    dump_json(match.log, os.path.join(cfg.output_dir, "solver_log.json"))
    table = balance_stage(pop, design, targets, cfg)
    with open(os.path.join(cfg.output_dir, "balance.csv"), "w") as fh:
        fh.write(table.to_csv())
    with open(os.path.join(cfg.output_dir, "balance.json"), "w") as fh:
        fh.write(table.to_json() + "\n")
    outcomes = outcome_stage(pop, design, cfg)
    dump_json(outcomes, os.path.join(cfg.output_dir, "outcomes.json"))
    errs = validate_outputs(cfg.output_dir)
    if errs:
        raise StageError("validate", "; ".join(errs[:5]), EXIT_INVALID)
    return {"population": pop, "targets": targets, "match": match, "design": design,
            "balance": table, "outcomes": outcomes}


def run_pipeline(cfg: PipelineConfig, log=print) -> int:
    """Exit status of a full run; partial artifacts are removed on failure."""
    try:
        execute(cfg, log)
    except ConfigError as exc:
        log(f"error [config]: {exc}")
        _cleanup(cfg.output_dir)
        return EXIT_CONFIG
    except StageError as exc:
        log(f"error [{exc.stage}]: {exc}")
        _cleanup(cfg.output_dir)
        return exc.code
    return EXIT_OK


# --- validation from files ------------------------------------------------------

def validate_outputs(out_dir) -> List[str]:
    """Re-check Step 1-2 samples and the block design from the files in
    ``out_dir`` alone (population.csv, solver_log.json, design.csv)."""
    errs: List[str] = []
    try:
        pop = load_population(os.path.join(out_dir, "population.csv"))
        with open(os.path.join(out_dir, "solver_log.json")) as fh:
            log = json.load(fh)
        design = BlockDesign.from_csv(os.path.join(out_dir, "design.csv"))
    except (OSError, ValueError, KeyError) as exc:
        return [f"cannot read outputs: {exc}"]
    s_bar = log["s_bar"]
    P = log["P"]
    means = np.array(log["template"]["means"])
    scales = np.array(log["template"]["scales"])
    eps = np.array(log["epsilons"])
    if list(pop.covariate_names) != log["covariates"]:
        errs.append("covariates in population.csv differ from solver_log.json")
        return errs
    z = (pop.X - means) / scales
    samples = {}
    for entry in log["groups"]:
        g = entry["group"]
        idx = pop.group_indices(g)
        ids = entry["sample_ids"]
        rows = []
        for p, sample in enumerate(ids):
            try:
                r = pop.index_of(sample)
            except KeyError as exc:
                errs.append(f"group {g}: unknown id {exc}")
                continue
            if not np.all(pop.group[r] == g):
                errs.append(f"group {g} sample {p}: member from another group")
            rows.append(r)
        samples[g] = rows
        # the sparse assignment must describe the same samples
        a = np.zeros((idx.size, P), dtype=np.int8)
        for i, p in entry["step2"]["assignment"]:
            a[i, p] = 1
        for p in range(P):
            if p < len(rows) and sorted(idx[a[:, p] == 1].tolist()) != sorted(rows[p].tolist()):
                errs.append(f"group {g} sample {p}: assignment and ids disagree")
        prob = PartitionProblem(z[idx], entry["targets"], eps, P,
                                covariate_names=log["covariates"])
        errs += [f"group {g}: {e}" for e in check_partition(prob, a, s_bar)]
    plan = default_plan()
    errs += check_design(design, plan, s_bar)
    slots = sample_allocation(plan, P)
    row_of = {i: k for k, i in enumerate(pop.ids)}
    members_of = {g: [set(r.tolist()) for r in rows] for g, rows in samples.items()}
    for b in design.blocks:
        for m in b.members:
            r = row_of.get(m.individual_id)
            if r is None:
                errs.append(f"block {b.block_id}: unknown individual {m.individual_id}")
                continue
            if pop.group[r] != m.group:
                errs.append(f"block {b.block_id}: {m.individual_id} is not in group {m.group}")
                continue
            sets = members_of.get(m.group)
            p = slots.get((m.group, b.type_id))
            if sets is None or p is None or p >= len(sets) or r not in sets[p]:
                errs.append(f"block {b.block_id}: {m.individual_id} not in sample {p} of group {m.group}")
    return errs
