import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aliasblock.partition import (
    InfeasibleMatching, PartitionProblem, PartitionSolution, brute_force_partition,
    check_partition, fixed_size_partition, max_size_partition, run_steps_1_2,
)


def random_problem(rng, I_max=12, P_max=2, K_max=3):
    P = int(rng.integers(1, P_max + 1))
    I = max(int(rng.integers(1, I_max + 1)), P)
    K = int(rng.integers(0, K_max + 1))
    if rng.random() < 0.5:
        X = rng.integers(0, 3, (I, K)).astype(float)
    else:
        X = np.round(rng.normal(size=(I, K)), 2)
    B = np.round(rng.normal(size=K) * 0.5, 2)
    eps = rng.choice([0.05, 0.2, 0.5, 1.0], size=K)
    return PartitionProblem(X.reshape(I, K), B, eps, P)


class TestExamples:
    def test_no_constraints(self):
        prob = PartitionProblem(np.zeros((5, 0)), [], [], P=2)
        assert max_size_partition(prob).s == 2

    def test_select_all(self):
        prob = PartitionProblem([0, 0, 1, 1], [0.5], [1e-9], P=1)
        sol = max_size_partition(prob)
        assert sol.s == 4 and sol.proved_optimal

    def test_one_zero_one_one(self):
        prob = PartitionProblem([0, 0, 1], [0.5], [1e-9], P=1)
        sol = max_size_partition(prob)
        assert sol.s == 2
        assert sorted(prob.covariates[sol.samples()[0], 0].tolist()) == [0, 1]

    def test_min_epsilon_exact_match(self):
        prob = PartitionProblem([0, 1], [0.0], [1.0], P=1)
        sol = fixed_size_partition(prob, 1, "min_total_epsilon")
        assert sol.samples()[0].tolist() == [0]
        assert sol.achieved_epsilons.sum() == 0

    def test_step1_witness_feasible_in_step2(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            prob = random_problem(rng)
            s = max_size_partition(prob).s
            assert fixed_size_partition(prob, s).feasible

    def test_single_huge_epsilon(self):
        assert max_size_partition(PartitionProblem([3.0], [0.0], [1e6], P=1)).s == 1
        assert brute_force_partition(PartitionProblem([3.0], [0.0], [1e6], P=1)) == 1

    def test_infeasible_verdict_agrees(self):
        prob = PartitionProblem([0, 0, 0, 1], [0.5], [0.01], P=1)
        assert not fixed_size_partition(prob, 1).feasible
        assert brute_force_partition(prob, 1, "feasibility") is False

    @pytest.mark.parametrize("seed", range(5))
    def test_two_samples_binary_covariate(self, seed):
        rng = np.random.default_rng(seed)
        prob = PartitionProblem(rng.integers(0, 2, 6).astype(float), [rng.random()], [0.1], P=2)
        for s in range(4):
            assert fixed_size_partition(prob, s).feasible == brute_force_partition(prob, s, "feasibility")
            got = fixed_size_partition(prob, s, "min_total_epsilon")
            ref = brute_force_partition(prob, s, "min_total_epsilon")
            if ref is None:
                assert not got.feasible
            else:
                assert got.achieved_epsilons.sum() == pytest.approx(ref, abs=1e-12)


def test_random_oracle_sample():
    rng = np.random.default_rng(99)
    for _ in range(40):
        prob = random_problem(rng)
        sol = max_size_partition(prob)
        assert sol.proved_optimal
        assert sol.s == brute_force_partition(prob)
        assert check_partition(prob, sol.assignment, sol.s) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_in_epsilon(seed):
    rng = np.random.default_rng(seed)
    I, K = int(rng.integers(4, 11)), int(rng.integers(1, 3))
    X = np.round(rng.normal(size=(I, K)), 2)
    B = np.round(rng.normal(size=K) * 0.3, 2)
    sizes = [max_size_partition(PartitionProblem(X, B, e, P=1)).s for e in (1.0, 0.5, 0.2, 0.05, 0.01)]
    assert sizes == sorted(sizes, reverse=True)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, I_max=10)
    perm = rng.permutation(prob.n_individuals)
    prob2 = PartitionProblem(prob.covariates[perm], prob.template_means, prob.epsilons, prob.P)
    a, b = max_size_partition(prob), max_size_partition(prob2)
    assert a.s == b.s
    # swapping sample columns keeps a solution valid
    assert check_partition(prob, a.assignment[:, ::-1], a.s) == []


def test_min_total_epsilon_not_worse_than_step1():
    rng = np.random.default_rng(4)
    for _ in range(20):
        prob = random_problem(rng, K_max=2)
        if prob.n_covariates == 0:
            continue
        s = max_size_partition(prob).s
        m = fixed_size_partition(prob, s, "min_total_epsilon")
        assert m.achieved_epsilons.sum() <= prob.epsilons.sum() + 1e-12


def test_large_instance_solution_is_valid():
    rng = np.random.default_rng(12)
    X = np.column_stack([rng.normal(size=120), rng.integers(0, 2, 120)])
    prob = PartitionProblem(X, [0.1, 0.45], [0.05, 0.05], P=3)
    sol = max_size_partition(prob)
    assert sol.s > 20
    assert check_partition(prob, sol.assignment, sol.s) == []
    assert sol.upper_bound >= sol.s
    if not sol.proved_optimal:
        assert sol.gap > 0


def test_check_partition_flags_violations():
    prob = PartitionProblem([0.0, 1.0, 2.0], [0.0], [0.1], P=1)
    a = np.array([[1], [1], [0]])
    errs = check_partition(prob, a, 2)
    assert any("covariate" in e for e in errs)
    assert any("size" in e for e in check_partition(prob, a, 3))


def test_json_round_trip():
    prob = PartitionProblem([[0.5, 1], [0.25, 0], [1, 1]], [0.5, 0.5], [0.2, 0.3], P=1,
                            covariate_names=["a", "b"], label="g")
    back = PartitionProblem.from_dict(json.loads(json.dumps(prob.to_dict())))
    assert np.array_equal(back.covariates, prob.covariates)
    assert back.covariate_names == ["a", "b"]
    sol = max_size_partition(prob)
    d = json.loads(json.dumps(sol.to_dict()))
    assert all(len(pair) == 2 for pair in d["assignment"])
    sol2 = PartitionSolution.from_dict(d)
    assert np.array_equal(sol2.assignment, sol.assignment) and sol2.s == sol.s


def test_problem_validation():
    with pytest.raises(ValueError):
        PartitionProblem([1.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        PartitionProblem([1.0], [0.0], [1.0], P=2)
    with pytest.raises(ValueError):
        brute_force_partition(PartitionProblem(np.zeros((13, 1)), [0.0], [1.0]))


class TestSteps:
    def test_identical_groups(self):
        rng = np.random.default_rng(0)
        X = rng.integers(0, 2, (9, 1)).astype(float)
        probs = [PartitionProblem(X, [0.5], [0.1], P=2) for _ in range(8)]
        res = run_steps_1_2(probs)
        assert res.s_bar == max_size_partition(probs[0]).s
        assert all(sol.s == res.s_bar for sol in res.step2)

    def test_tiny_group_limits_s_bar(self):
        rng = np.random.default_rng(1)
        probs = [PartitionProblem(rng.integers(0, 2, (12, 2)), [0.5, 0.5], [0.1, 0.1], P=2)
                 for _ in range(7)]
        probs.append(PartitionProblem([[0, 0], [1, 1], [0, 1], [1, 0], [1, 1]], [0.5, 0.5],
                                      [0.1, 0.1], P=2))
        res = run_steps_1_2(probs)
        assert res.s_bar == 2
        assert max(sol.s for sol in res.step1) > 2
        for prob, sol in zip(probs, res.step2):
            assert check_partition(prob, sol.assignment, res.s_bar) == []
            assert all(len(s) == res.s_bar for s in sol.samples())

    def test_shared_dimensions(self):
        with pytest.raises(ValueError):
            run_steps_1_2([PartitionProblem([[1.0]], [0], [1]), PartitionProblem([[1.0, 2.0]], [0, 0], [1, 1])])

    def test_non_monotone_group_raises(self):
        # group 1 reaches s=2 but no single unit is within 0.3 of the
        # template on both covariates, so it cannot follow s_bar=1
        hard = PartitionProblem([[1, -1], [-1, 1], [1, 1], [-1, -1]], [0, 0], [0.3, 0.3], P=1)
        assert max_size_partition(hard).s == 4
        assert not fixed_size_partition(hard, 1).feasible
        easy = PartitionProblem([[0, 0], [5, 5]], [0, 0], [0.3, 0.3], P=1)
        with pytest.raises(InfeasibleMatching, match="group 1"):
            run_steps_1_2([hard, easy])
