import csv
import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy import stats

from aliasblock import pipeline as pl
from aliasblock.cli import main

TINY = {"group_sizes": [30] * 8}


def write_config(tmp_path, name="cfg.json", **over):
    cfg = {"seed": 1, "synth": dict(TINY), "output_dir": str(tmp_path / "out"),
           "draws": 1000, "epsilon": 0.5}
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, cfg


def read_bytes(out_dir):
    return {n: open(os.path.join(out_dir, n), "rb").read() for n in pl.ARTIFACTS}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    path, cfg = write_config(tmp)
    t0 = time.perf_counter()
    code = main(["pipeline", "--config", str(path)])
    elapsed = time.perf_counter() - t0
    return code, cfg, elapsed, path


def test_tiny_pipeline(tiny_run):
    code, cfg, elapsed, _ = tiny_run
    assert code == 0
    assert elapsed < 10
    out = cfg["output_dir"]
    for name in pl.ARTIFACTS:
        assert os.path.exists(os.path.join(out, name))
    log = json.load(open(os.path.join(out, "solver_log.json")))
    s_bar = log["s_bar"]
    with open(os.path.join(out, "design.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 * 6 * s_bar
    assert pl.validate_outputs(out) == []


def test_outcomes_report(tiny_run):
    out = json.load(open(os.path.join(tiny_run[1]["output_dir"], "outcomes.json")))
    assert set(out["per_type"]) == {str(t) for t in range(1, 7)}
    assert len(out["sensitivity"]) == len(pl.DEFAULT_GAMMAS)
    assert {"p_two_sided", "hl_estimate", "ci"} <= set(out["comparison_2_vs_5"])
    assert out["pooled"]["count"] == 2 * json.load(
        open(os.path.join(tiny_run[1]["output_dir"], "solver_log.json")))["s_bar"]


def test_validate_command(tiny_run, capsys):
    assert main(["validate", tiny_run[1]["output_dir"]]) == 0
    assert "ok" in capsys.readouterr().out


def test_determinism(tiny_run):
    _, cfg, _, path = tiny_run
    first = read_bytes(cfg["output_dir"])
    assert main(["pipeline", "--config", str(path)]) == 0
    assert read_bytes(cfg["output_dir"]) == first


def test_threads_do_not_change_results(tmp_path, tiny_run):
    path, cfg = write_config(tmp_path, threads=3, output_dir=tiny_run[1]["output_dir"] + "_t")
    assert main(["pipeline", "--config", str(path)]) == 0
    a, b = read_bytes(tiny_run[1]["output_dir"]), read_bytes(cfg["output_dir"])
    for name in ("design.csv", "balance.csv", "balance.json", "outcomes.json", "population.csv"):
        assert a[name] == b[name]


def test_stagewise_commands_match_pipeline(tmp_path, tiny_run):
    path, cfg = write_config(tmp_path, output_dir=str(tmp_path / "stages"))
    for cmd in ("match", "assemble", "balance", "outcomes"):
        assert main([cmd, "--config", str(path)]) == 0, cmd
    ref = read_bytes(tiny_run[1]["output_dir"])
    for name in ("design.csv", "balance.csv", "balance.json", "outcomes.json"):
        assert open(os.path.join(cfg["output_dir"], name), "rb").read() == ref[name], name


def test_validate_detects_tampering(tmp_path, tiny_run):
    import shutil
    out = tmp_path / "tampered"
    shutil.copytree(tiny_run[1]["output_dir"], out)
    lines = (out / "design.csv").read_text().splitlines()
    # give the first block's first member another group's id
    first = lines[1].split(",")
    other = next(l for l in lines[1:] if l.split(",")[2] != first[2]).split(",")
    first[4] = other[4]
    lines[1] = ",".join(first)
    (out / "design.csv").write_text("\n".join(lines) + "\n")
    assert pl.validate_outputs(str(out)) != []
    assert main(["validate", str(out)]) == pl.EXIT_INVALID


def test_validate_detects_broken_balance(tmp_path, tiny_run):
    import shutil
    out = tmp_path / "eps"
    shutil.copytree(tiny_run[1]["output_dir"], out)
    log = json.load(open(out / "solver_log.json"))
    log["epsilons"] = [1e-6] * len(log["epsilons"])
    json.dump(log, open(out / "solver_log.json", "w"))
    assert any("covariate" in e for e in pl.validate_outputs(str(out)))


def test_infeasible_exit_and_cleanup(tmp_path):
    path, cfg = write_config(tmp_path, epsilon=0.001)
    assert main(["pipeline", "--config", str(path)]) == pl.EXIT_INFEASIBLE
    assert not any(os.path.exists(os.path.join(cfg["output_dir"], n)) for n in pl.ARTIFACTS)


@pytest.mark.parametrize("over", [{"seed": None}, {"P": 2}, {"draws": 10}, {"epsilon": -1},
                                  {"bogus": 1}, {"input": "x.csv"}])
def test_config_errors(tmp_path, over):
    path, _ = write_config(tmp_path, **over)
    assert main(["pipeline", "--config", str(path)]) == pl.EXIT_CONFIG


def test_missing_seed_flag(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"synth": TINY, "output_dir": str(tmp_path / "o")}))
    assert main(["pipeline", "--config", str(path)]) == pl.EXIT_CONFIG
    assert main(["pipeline", "--config", str(path), "--seed", "1", "--epsilon", "0.5",
                 "--draws", "1000"]) == 0


def test_epsilon_file_and_population_input(tmp_path):
    pop_path = tmp_path / "pop.csv"
    assert main(["synth", "--seed", "2", "--group-size", "30", "--out", str(pop_path)]) == 0
    eps = {"age": 0.3}
    (tmp_path / "eps.json").write_text(json.dumps(eps))
    out = tmp_path / "o"
    code = main(["pipeline", "--population", str(pop_path), "--seed", "2", "--epsilon", "0.5",
                 "--epsilon-file", str(tmp_path / "eps.json"), "--out-dir", str(out),
                 "--draws", "1000", "--features", "age,age*LE,age*IU*TIME"])
    assert code == 0
    log = json.load(open(out / "solver_log.json"))
    k = log["covariates"].index("age")
    assert log["epsilons"][k] == 0.3
    bal = json.load(open(out / "balance.json"))
    assert [r["feature"] for r in bal["rows"]] == ["age", "age*LE", "age*IU*TIME"]


def test_bad_population_file(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,w_prime,w_dprime,w_tprime,age\na,2,1,1,30\n")
    assert main(["pipeline", "--population", str(bad), "--seed", "1"]) == pl.EXIT_CONFIG


def test_module_entry_point(tmp_path):
    out = tmp_path / "p.csv"
    res = subprocess.run([sys.executable, "-m", "aliasblock", "synth", "--seed", "0",
                          "--group-size", "3", "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert len(out.read_text().splitlines()) == 1 + 24


def test_null_effect_calibration(tmp_path):
    # with no benefit effect the Gamma=1 p-value should not pile up near 0
    ps = []
    for seed in range(12):
        cfg = pl.PipelineConfig(seed=seed, synth={"group_sizes": [40] * 8, "tau": 0.0},
                                output_dir=str(tmp_path / f"o{seed}"), epsilon=0.75, draws=1000)
        res = pl.execute(cfg, log=lambda *_: None)
        ps.append(res["outcomes"]["sensitivity"][0]["upper_p"])
    assert stats.kstest(ps, "uniform").pvalue > 0.001
    assert np.mean(np.array(ps) < 0.05) < 0.35
