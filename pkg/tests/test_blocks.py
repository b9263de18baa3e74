import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from aliasblock.assignment import assignment_cost, optimal_assignment
from aliasblock.blocks import (
    BlockDesign, BlockTypePlan, aliased_covariates, assemble_design, check_design,
    cross_pair_cost, default_plan, pair_of_pairs, pair_within_type, rank_mahalanobis,
    sample_allocation,
)


def brute_assignment(C):
    n = C.shape[0]
    best, arg = None, None
    for perm in itertools.permutations(range(n)):  # lexicographic order
        v = sum(C[i, perm[i]] for i in range(n))
        if best is None or v < best - 1e-12:
            best, arg = v, perm
    return best, arg


class TestAssignment:
    def test_diagonal_zero(self):
        C = np.ones((5, 5)) - np.eye(5)
        assert optimal_assignment(C).tolist() == list(range(5))

    def test_outer_product(self):
        C = np.array([[1, 2, 3], [2, 4, 6], [3, 6, 9]], dtype=float)
        best, _ = brute_assignment(C)
        assert assignment_cost(C, optimal_assignment(C)) == best

    def test_one_by_one(self):
        assert optimal_assignment([[4.2]]).tolist() == [0]

    def test_errors(self):
        with pytest.raises(ValueError):
            optimal_assignment(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            optimal_assignment([[0, np.inf], [1, 0]])

    def test_lexicographic_ties(self):
        assert optimal_assignment(np.zeros((4, 4))).tolist() == [0, 1, 2, 3]
        # optima (1, 0, 2) and (0, 1, 2); the smaller one wins
        C = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=float)
        assert optimal_assignment(C).tolist() == [0, 1, 2]
        C = np.array([[2, 0, 2], [0, 2, 2], [2, 2, 0]], dtype=float)
        assert optimal_assignment(C).tolist() == [1, 0, 2]

    @settings(max_examples=150, deadline=None)
    @given(st.integers(1, 7), st.integers(0, 2**31 - 1), st.booleans())
    def test_matches_enumeration(self, n, seed, integer):
        rng = np.random.default_rng(seed)
        C = rng.integers(0, 4, (n, n)).astype(float) if integer else rng.random((n, n))
        best, arg = brute_assignment(C)
        perm = optimal_assignment(C)
        assert assignment_cost(C, perm) == pytest.approx(best, abs=1e-12)
        assert tuple(perm) == arg

    def test_large_matches_scipy(self):
        rng = np.random.default_rng(5)
        C = rng.random((150, 150))
        r, c = linear_sum_assignment(C)
        assert assignment_cost(C, optimal_assignment(C)) == pytest.approx(C[r, c].sum(), abs=1e-9)


class TestRankMahalanobis:
    def test_one_covariate_formula(self):
        a = np.array([[3.0], [10.0], [-1.0]])
        b = np.array([[7.0], [0.5]])
        D = rank_mahalanobis(a, b)
        ranks_a, ranks_b = np.array([3, 5, 1]), np.array([4, 2])
        I = 5
        expect = 12 * (ranks_a[:, None] - ranks_b[None, :]) ** 2 / (I * I - 1)
        np.testing.assert_allclose(D, expect, rtol=1e-12)

    def test_identical_units(self):
        a = np.array([[1.0, 2.0], [3.0, 1.0]])
        D = rank_mahalanobis(a, a.copy())
        assert D[0, 0] == pytest.approx(0, abs=1e-12) and D[1, 1] == pytest.approx(0, abs=1e-12)

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(6, 3))
        D = rank_mahalanobis(A, A)
        np.testing.assert_allclose(D, D.T, atol=1e-9)
        np.testing.assert_allclose(np.diag(D), 0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        D1 = rank_mahalanobis(A, B)
        A2, B2 = A.copy(), B.copy()
        A2[:, 1], B2[:, 1] = np.exp(A[:, 1]), np.exp(B[:, 1])
        np.testing.assert_allclose(rank_mahalanobis(A2, B2), D1, atol=1e-9)

    def test_singular_flagged(self):
        A = np.array([[1.0, 1.0], [2.0, 2.0]])
        B = np.array([[3.0, 3.0], [4.0, 4.0]])
        D, flag = rank_mahalanobis(A, B, return_flag=True)
        assert flag and np.all(np.isfinite(D))

    def test_subset_and_errors(self):
        A = np.array([[1.0, 9.0], [2.0, 0.0]])
        np.testing.assert_allclose(rank_mahalanobis(A, A, [0]), rank_mahalanobis(A[:, :1], A[:, :1]))
        with pytest.raises(ValueError):
            rank_mahalanobis(np.zeros((1, 1)), np.zeros((0, 1)))


class TestPairing:
    def test_single(self):
        assert pair_within_type(np.zeros((2, 1)), [0], [1]) == [(0, 1)]

    def test_crossed_ages(self):
        X = np.array([[30.0], [50.0], [50.0], [30.0]])
        assert pair_within_type(X, [0, 1], [2, 3]) == [(0, 3), (1, 2)]

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            pair_within_type(np.zeros((3, 1)), [0], [1, 2])
        with pytest.raises(ValueError):
            pair_of_pairs(np.zeros((6, 1)), [(0, 1)], [(2, 3), (4, 5)])

    def test_pair_of_pairs_single(self):
        assert pair_of_pairs(np.arange(4.0).reshape(-1, 1), [(0, 1)], [(2, 3)]) == [(0, 0)]

    def test_cross_cost_identical_pairs(self):
        D = np.full((2, 2), 0.7)
        assert cross_pair_cost(D, 1)[0, 0] == pytest.approx(4 * 0.7)

    def test_two_plus_two_brute_force(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(8, 2))
        pa, pb = [(0, 1), (2, 3)], [(4, 5), (6, 7)]
        D = rank_mahalanobis(X[[0, 2, 1, 3]], X[[4, 6, 5, 7]])
        cost = cross_pair_cost(D, 2)
        best = min([(0, 1), (1, 0)], key=lambda p: cost[0, p[0]] + cost[1, p[1]])
        got = pair_of_pairs(X, pa, pb)
        assert [j for _, j in got] == list(best)

    def test_beats_random_pairings(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 3))
        sel_a, sel_b = np.arange(20), np.arange(20, 40)
        pairs = pair_within_type(X, sel_a, sel_b)
        D = rank_mahalanobis(X[sel_a], X[sel_b])
        got = sum(D[a, b - 20] for a, b in pairs)
        for _ in range(100):
            perm = rng.permutation(20)
            assert got <= D[np.arange(20), perm].sum() + 1e-9


class TestPlan:
    def test_six_types(self):
        plan = default_plan()
        assert [p.type_id for p in plan] == [1, 2, 3, 4, 5, 6]
        for p in plan:
            assert sum(p.signs) == 0
            assert sum(g >= 5 for g in p.groups) == 2

    def test_br_in_types_1_2_3(self):
        assert [p.type_id for p in default_plan() if 5 in p.groups] == [1, 2, 3]

    def test_allocation_uses_each_sample_once(self):
        slots = sample_allocation(default_plan(), 3)
        for g in range(1, 9):
            assert sorted(p for (gg, _), p in slots.items() if gg == g) == [0, 1, 2]

    def test_bad_plan(self):
        with pytest.raises(ValueError):
            BlockTypePlan(1, (5, 6, 1, 2), (1, 1, -1, 1))
        with pytest.raises(ValueError):
            BlockTypePlan(1, (5, 6, 7, 2), (1, -1, -1, 1))

    def test_aliased_covariates_from_targets(self):
        # a covariate with different targets in the two LE cells is aliased
        # in types pairing different LE cells (1, 3, 4, 6)
        le = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
        T = np.column_stack([np.zeros(8), le * 3 + 10])
        got = {p.type_id: aliased_covariates(p, T) for p in default_plan()}
        assert got == {1: [1], 2: [], 3: [1], 4: [1], 5: [], 6: [1]}


def make_samples(rng, s_bar, K=2):
    N = 8 * 3 * s_bar
    X = rng.normal(size=(N, K))
    ids = [f"u{i}" for i in range(N)]
    samples, start = {}, 0
    for g in range(1, 9):
        samples[g] = []
        for _ in range(3):
            samples[g].append(np.arange(start, start + s_bar))
            start += s_bar
    return X, ids, samples


class TestAssemble:
    @pytest.mark.parametrize("s_bar", [1, 4])
    def test_counts_and_invariants(self, s_bar):
        rng = np.random.default_rng(s_bar)
        X, ids, samples = make_samples(rng, s_bar)
        design = assemble_design(X, ids, samples)
        assert len(design.blocks) == 6 * s_bar
        assert design.type_counts() == {t: s_bar for t in range(1, 7)}
        assert check_design(design, default_plan(), s_bar) == []
        used = [m.individual_id for b in design.blocks for m in b.members]
        assert len(used) == len(set(used)) == len(ids)

    def test_threads_do_not_change_result(self, tmp_path):
        rng = np.random.default_rng(0)
        X, ids, samples = make_samples(rng, 5)
        a = assemble_design(X, ids, samples).to_csv()
        b = assemble_design(X, ids, samples, threads=4).to_csv()
        assert a == b

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        X, ids, samples = make_samples(rng, 3)
        design = assemble_design(X, ids, samples)
        path = tmp_path / "design.csv"
        design.to_csv(path)
        back = BlockDesign.from_csv(path)
        assert back.to_csv() == design.to_csv()
        assert len(path.read_text().splitlines()) == 1 + 4 * 6 * 3

    def test_unequal_samples(self):
        rng = np.random.default_rng(0)
        X, ids, samples = make_samples(rng, 3)
        samples[1][0] = samples[1][0][:2]
        with pytest.raises(ValueError):
            assemble_design(X, ids, samples)

    def test_check_design_catches_reuse(self):
        rng = np.random.default_rng(0)
        X, ids, samples = make_samples(rng, 2)
        design = assemble_design(X, ids, samples)
        b0, b1 = design.blocks[0], design.blocks[1]
        design.blocks[1] = type(b1)(b1.block_id, b1.type_id, b0.members)
        assert any("used twice" in e for e in check_design(design, default_plan(), 2))
