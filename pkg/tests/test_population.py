import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliasblock.design import BENEFIT_DURATION_H
from aliasblock.population import (
    DEFAULT_COVARIATES, GROUP_SIGNS, PopulationSchema, StudyPopulation, SynthConfig, Template,
    build_template, derive_group, group_means, load_population, outcome_components,
    save_population, standardize, synthesize_population,
)


def one_per_group(values=None):
    ids = [f"r{g}" for g in range(1, 9)]
    W = np.array([GROUP_SIGNS[g] for g in range(1, 9)])
    X = np.arange(8.0).reshape(8, 1) if values is None else np.asarray(values, float).reshape(8, -1)
    return StudyPopulation(ids, X, W, ["x"] if X.shape[1] == 1 else [f"x{k}" for k in range(X.shape[1])])


class TestDeriveGroup:
    @pytest.mark.parametrize("w,g", [((1, 1, 1), 5), ((1, 1, -1), 1), ((-1, -1, 1), 8)])
    def test_table_rows(self, w, g):
        assert derive_group(*w) == g

    def test_bijection(self):
        seen = {derive_group(*w) for w in itertools.product([1, -1], repeat=3)}
        assert seen == set(range(1, 9))

    @pytest.mark.parametrize("w", [(0, 1, 1), (1, 2, 1), (1, 1, None)])
    def test_rejects(self, w):
        with pytest.raises(ValueError):
            derive_group(*w)


def write_csv(path, rows, header="id,w_prime,w_dprime,w_tprime,outcome,age"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestLoad:
    def rows(self, zero_one=False):
        out = []
        for g in range(1, 9):
            w = GROUP_SIGNS[g]
            if zero_one:
                w = tuple((v + 1) // 2 for v in w)
            out.append(f"p{g},{w[0]},{w[1]},{w[2]},{g * 1.5},{30 + g}")
        return out

    def test_minimal(self, tmp_path):
        pop = load_population(write_csv(tmp_path / "a.csv", self.rows()))
        assert pop.group_counts() == [1] * 8
        assert pop.covariate_names == ["age"]
        assert pop.outcome.tolist() == [g * 1.5 for g in range(1, 9)]

    def test_bad_sign_names_row_and_column(self, tmp_path):
        rows = self.rows()
        rows[2] = "p3,2,-1,-1,1,30"
        with pytest.raises(ValueError, match=r"row 4.*w_prime"):
            load_population(write_csv(tmp_path / "a.csv", rows))

    def test_zero_one_flag(self, tmp_path):
        a = load_population(write_csv(tmp_path / "a.csv", self.rows()))
        b = load_population(write_csv(tmp_path / "b.csv", self.rows(True)),
                            PopulationSchema(zero_one=True))
        assert a.ids == b.ids
        assert np.array_equal(a.w, b.w) and np.array_equal(a.X, b.X)

    def test_zero_one_not_silent(self, tmp_path):
        with pytest.raises(ValueError):
            load_population(write_csv(tmp_path / "b.csv", self.rows(True)))

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "a.csv", ["p1,1,1,-1,30"], "id,w_prime,w_dprime,outcome,age")
        with pytest.raises(ValueError, match="w_tprime"):
            load_population(path)

    def test_non_numeric(self, tmp_path):
        rows = self.rows()
        rows[0] = "p1,1,1,-1,3,old"
        with pytest.raises(ValueError, match="age"):
            load_population(write_csv(tmp_path / "a.csv", rows))

    def test_duplicate_id(self, tmp_path):
        rows = self.rows()
        rows[1] = rows[1].replace("p2", "p1")
        with pytest.raises(ValueError, match="duplicate"):
            load_population(write_csv(tmp_path / "a.csv", rows))

    def test_round_trip_bytes(self, tmp_path):
        pop = synthesize_population(SynthConfig(seed=3, group_sizes=[5] * 8))
        p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
        save_population(pop, p1)
        back = load_population(p1)
        assert np.array_equal(back.X, pop.X)
        assert np.array_equal(back.outcome, pop.outcome)
        assert np.array_equal(back.group, pop.group)
        save_population(back, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestTemplate:
    def test_average_of_group_means(self):
        # group means 40 (odd groups) and 50 (even groups)
        pop = one_per_group([40, 50] * 4)
        assert build_template(pop).means[0] == 45

    def test_identical_groups(self):
        vals = np.array([1.0, 2.0, 6.0])
        X = np.tile(vals, 8).reshape(-1, 1)
        W = np.repeat([GROUP_SIGNS[g] for g in range(1, 9)], 3, axis=0)
        pop = StudyPopulation([str(i) for i in range(24)], X, W, ["x"])
        assert build_template(pop).means[0] == pytest.approx(X.mean())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_recomputation(self, seed):
        rng = np.random.default_rng(seed)
        sizes = rng.integers(1, 6, size=8)
        W = np.repeat([GROUP_SIGNS[g] for g in range(1, 9)], sizes, axis=0)
        X = rng.normal(size=(W.shape[0], 3)) * 10
        pop = StudyPopulation([str(i) for i in range(W.shape[0])], X, W, ["a", "b", "c"])
        expect = np.zeros(3)
        start = 0
        for n in sizes:
            expect += X[start:start + n].sum(axis=0) / n
            start += n
        np.testing.assert_allclose(build_template(pop).means, expect / 8, rtol=1e-12, atol=1e-12)

    def test_empty_group(self):
        pop = one_per_group().subset(range(7))
        with pytest.raises(ValueError, match="empty"):
            build_template(pop)

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            Template([1.0], [0.0])


class TestStandardize:
    def test_constant_to_zero(self):
        pop = one_per_group(np.full(8, 3.0))
        out = standardize(pop, Template([3.0], [2.0]))
        assert np.all(out.X == 0)

    def test_arithmetic(self):
        pop = one_per_group([10, 20] * 4)
        out = standardize(pop, Template([15.0], [5.0]))
        assert out.X[:, 0].tolist() == [-1, 1] * 4

    def test_idempotent(self):
        pop = synthesize_population(SynthConfig(seed=1, group_sizes=[70, 30, 50, 90, 40, 60, 80, 20]))
        once = standardize(pop, build_template(pop))
        twice = standardize(once, build_template(once))
        np.testing.assert_allclose(build_template(once).means, 0, atol=1e-12)
        np.testing.assert_allclose(twice.X, once.X, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            standardize(one_per_group(), Template([0.0, 0.0], [1.0, 1.0]))


class TestSynth:
    def test_deterministic(self):
        a = synthesize_population(SynthConfig(seed=11, group_sizes=[20] * 8))
        b = synthesize_population(SynthConfig(seed=11, group_sizes=[20] * 8))
        assert a.ids == b.ids and np.array_equal(a.X, b.X) and np.array_equal(a.outcome, b.outcome)

    def test_shape(self):
        pop = synthesize_population(SynthConfig(seed=0, group_sizes=[3, 4, 5, 6, 7, 8, 9, 10]))
        assert pop.group_counts() == [3, 4, 5, 6, 7, 8, 9, 10]
        assert pop.covariate_names == DEFAULT_COVARIATES and len(DEFAULT_COVARIATES) == 21

    @pytest.mark.parametrize("seed", range(5))
    def test_cuts(self, seed):
        cfg = SynthConfig(seed=seed, group_sizes=[400] * 8)
        pop = synthesize_population(cfg)
        wage, re = pop.covariate("prior_wage"), pop.covariate("rel_employment")
        assert np.array_equal(pop.w[:, 0] == 1, wage <= 12610)
        assert np.array_equal(pop.w[:, 1] == 1, re >= 0.40)
        assert np.array_equal(pop.covariate("low_earnings") == 1, pop.w[:, 0] == 1)
        assert np.array_equal(pop.covariate("infrequent_unemp") == 1, pop.w[:, 1] == 1)

    def test_null_model(self):
        pop = synthesize_population(SynthConfig(seed=2, group_sizes=[10] * 8, tau=0, noise=0,
                                                xi={}, eta={}))
        assert np.all(pop.outcome == 0)

    def test_pure_effect_did(self):
        from aliasblock.blocks import default_plan
        pop = synthesize_population(SynthConfig(seed=2, group_sizes=[10] * 8, tau=5, noise=0,
                                                xi={}, eta={}))
        per_group = {g: pop.outcome[pop.group == g] for g in range(1, 9)}
        for plan in default_plan():
            if plan.type_id not in (2, 5):
                continue
            # any choice of one member per slot gives the same DiD
            did = sum(s * per_group[g][3] for g, s in zip(plan.groups, plan.signs))
            assert did == 5

    def test_rejects_time_in_xi(self):
        with pytest.raises(ValueError):
            SynthConfig(seed=0, xi={"age*TIME": 1.0})
        with pytest.raises(ValueError):
            SynthConfig(seed=0, eta={"IU": 1.0})
        with pytest.raises(ValueError):
            SynthConfig(seed=0, group_sizes=[0] + [5] * 7)
        with pytest.raises(ValueError):
            SynthConfig.from_dict({"group_sizes": [5] * 8})

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_h_annihilates_xi_eta_at_equal_means(self, seed):
        # identical covariate rows in every group => only the benefit effect
        # survives the h-weighted contrast of group means
        rng = np.random.default_rng(seed)
        base = synthesize_population(SynthConfig(seed=seed % 1000, group_sizes=[4] * 8))
        rows = base.X[rng.choice(len(base), 6, replace=False)]
        X = np.tile(rows, (8, 1))
        W = np.repeat([GROUP_SIGNS[g] for g in range(1, 9)], 6, axis=0)
        pop = StudyPopulation([str(i) for i in range(48)], X, W, list(DEFAULT_COVARIATES))
        cfg = SynthConfig(seed=0, xi={"1": rng.normal(), "age": rng.normal(), "LE*IU": rng.normal(),
                                      "age*LE*IU": rng.normal(), "female*IU": rng.normal()},
                          eta={"TIME": rng.normal(), "age*LE*TIME": rng.normal(),
                               "LE*TIME": rng.normal()})
        xi, eta = outcome_components(pop, cfg)
        pop.outcome = xi + eta
        ypop = StudyPopulation(pop.ids, pop.outcome.reshape(-1, 1), W, ["y"])
        means = group_means(ypop)[:, 0]
        assert abs(np.dot(BENEFIT_DURATION_H, means)) < 1e-9
