"""Command-line interface: ``aliasblock <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline as pl
from .blocks import BlockDesign
from .population import SynthConfig, load_population, save_population, synthesize_population


def _read_epsilons(args):
    eps = {}
    if getattr(args, "epsilon_file", None):
        try:
            with open(args.epsilon_file) as fh:
                eps = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise pl.ConfigError(f"{args.epsilon_file}: {exc}") from None
        if not isinstance(eps, dict):
            raise pl.ConfigError("epsilon file must map covariate names to values")
    return eps


def _config(args, **extra) -> pl.PipelineConfig:
    d = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise pl.ConfigError(f"{args.config}: {exc}") from None
    if getattr(args, "population", None):
        d["input"] = args.population
        d.pop("synth", None)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epsilon", None) is not None:
        d["epsilon"] = args.epsilon
    eps = _read_epsilons(args)
    if eps:
        d["epsilons"] = eps
    if getattr(args, "threads", None) is not None:
        d["threads"] = args.threads
    if getattr(args, "out_dir", None):
        d["output_dir"] = args.out_dir
    if getattr(args, "draws", None) is not None:
        d["draws"] = args.draws
    if getattr(args, "features", None):
        d["features"] = [f.strip() for f in args.features.split(",") if f.strip()]
    d.update(extra)
    d.setdefault("seed", None)
    if d["seed"] is None:
        raise pl.ConfigError("a seed is required (--seed or config)")
    return pl.PipelineConfig.from_dict(d)


def cmd_synth(args):
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.group_size is not None:
        d["group_sizes"] = [args.group_size] * 8
    cfg = SynthConfig.from_dict(d)
    pop = synthesize_population(cfg)
    save_population(pop, args.out)
    print(f"wrote {len(pop)} records to {args.out}")
    return 0


def cmd_match(args):
    cfg = _config(args)
    os.makedirs(cfg.output_dir, exist_ok=True)
    pop = pl.obtain_population(cfg)
    targets = pl.balance_targets(pop, cfg)
    match = pl.match_stage(pop, targets, cfg)
    match.log["config"] = cfg.to_dict()
    pl.dump_json(match.log, os.path.join(cfg.output_dir, "solver_log.json"))
    print(f"s_bar = {match.s_bar}")
    return 0


def _load_match(cfg, pop):
    path = os.path.join(cfg.output_dir, "solver_log.json")
    try:
        with open(path) as fh:
            log = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise pl.ConfigError(f"{path}: {exc}") from None
    samples = {e["group"]: [pop.index_of(ids) for ids in e["sample_ids"]] for e in log["groups"]}
    return pl.MatchResult(log["s_bar"], samples, log)


def cmd_assemble(args):
    cfg = _config(args)
    pop = pl.obtain_population(cfg)
    targets = pl.balance_targets(pop, cfg)
    match = _load_match(cfg, pop)
    design = pl.assemble_stage(pop, targets, match, cfg)
    design.to_csv(os.path.join(cfg.output_dir, "design.csv"))
    pl.dump_json(match.log, os.path.join(cfg.output_dir, "solver_log.json"))
    print(f"assembled {len(design.blocks)} blocks")
    return 0


def _load_design(cfg):
    path = os.path.join(cfg.output_dir, "design.csv")
    try:
        return BlockDesign.from_csv(path)
    except (OSError, ValueError) as exc:
        raise pl.ConfigError(f"{path}: {exc}") from None


def cmd_balance(args):
    cfg = _config(args)
    pop = pl.obtain_population(cfg)
    targets = pl.balance_targets(pop, cfg)
    table = pl.balance_stage(pop, _load_design(cfg), targets, cfg)
    with open(os.path.join(cfg.output_dir, "balance.csv"), "w") as fh:
        fh.write(table.to_csv())
    with open(os.path.join(cfg.output_dir, "balance.json"), "w") as fh:
        fh.write(table.to_json() + "\n")
    print(json.dumps(table.summary(), sort_keys=True))
    return 0


def cmd_outcomes(args):
    cfg = _config(args)
    pop = pl.obtain_population(cfg)
    out = pl.outcome_stage(pop, _load_design(cfg), cfg)
    pl.dump_json(out, os.path.join(cfg.output_dir, "outcomes.json"))
    if out.get("available"):
        print(f"pooled median DiD = {out['pooled']['median']:.3f}")
    return 0


def cmd_pipeline(args):
    cfg = _config(args)
    return pl.run_pipeline(cfg)


def cmd_validate(args):
    errs = pl.validate_outputs(args.dir)
    for e in errs:
        print(e)
    if errs:
        print(f"{len(errs)} problem(s)")
        return pl.EXIT_INVALID
    print("ok")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="aliasblock",
                                 description="Balanced block designs from eligibility-aliased observational data.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, population=True):
        p.add_argument("--config", help="pipeline config JSON")
        if population:
            p.add_argument("--population", help="population CSV (overrides the config input)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        p.add_argument("--epsilon", type=float, help="balance tolerance for every covariate (SD units)")
        p.add_argument("--epsilon-file", dest="epsilon_file",
                       help="JSON mapping covariate -> tolerance")
        p.add_argument("--threads", type=int, help="worker cap; results do not depend on it")

    p = sub.add_parser("synth", help="write a synthetic population CSV")
    p.add_argument("--config", help="SynthConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in [
        ("match", cmd_match, "Steps 1-2: balanced samples -> solver_log.json"),
        ("assemble", cmd_assemble, "Step 3: blocks -> design.csv"),
        ("balance", cmd_balance, "balance tables -> balance.csv/json"),
        ("outcomes", cmd_outcomes, "outcome analysis -> outcomes.json"),
        ("pipeline", cmd_pipeline, "all stages"),
    ]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name in ("balance", "pipeline"):
            p.add_argument("--draws", type=int)
            p.add_argument("--features", help="comma-separated, e.g. age,age*LE,age*LE*TIME")
        p.set_defaults(func=func)

    p = sub.add_parser("validate", help="re-check outputs from files")
    p.add_argument("dir")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pl.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
