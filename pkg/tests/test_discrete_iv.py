import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivcalc import scm_sim as sim
from ivcalc.dataset import DiscreteDataset, group_stats
from ivcalc.discrete_iv import (ContrastSystem, PairSet, bootstrap_counts, build_contrasts, check_rank, estimate,
                                naive_difference, resolve_pairs, solve_theta)
from ivcalc.errors import EmptyGroupError, IVWarning, UnderidentifiedError


def system(A, b, se=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return ContrastSystem(A, np.asarray(b, dtype=float), tuple((0, k + 1) for k in range(len(A))), se)


def perfect_compliance_model():
    # effects 1 and 2 with equal weight; baselines differ so X would be confounded
    return sim.example3_scm({"complier": 1.0}, {"complier": [(0.5, 0.0, 1.0), (0.5, 1.0, 3.0)]})


class TestPairSet:
    def test_canonical_order(self):
        assert PairSet(((2, 0), (1, 2))).pairs == ((0, 2), (1, 2))

    @pytest.mark.parametrize("pairs", [((0, 0),), ((0, 1), (1, 0)), ((-1, 2),)])
    def test_invalid(self, pairs):
        with pytest.raises(ValueError):
            PairSet(pairs)

    def test_constructors(self):
        assert len(PairSet.all_pairs(4)) == 6
        assert PairSet.spanning(3).pairs == ((0, 1), (0, 2))

    def test_resolve(self):
        assert resolve_pairs(None, 3) == PairSet.all_pairs(3)
        assert resolve_pairs([(0, 2)], 3).pairs == ((0, 2),)
        with pytest.raises(ValueError):
            resolve_pairs([(0, 3)], 3)
        with pytest.raises(ValueError):
            resolve_pairs("every", 3)


class TestBuildContrasts:
    def test_perfect_compliance(self):
        d = DiscreteDataset([1.0, 3.0, 5.0, 7.0], [0, 0, 1, 1], [0, 0, 1, 1], 1, 2)
        sys_ = build_contrasts(group_stats(d))
        np.testing.assert_array_equal(sys_.A, [[1.0]])
        np.testing.assert_array_equal(sys_.b, [4.0])

    def test_identical_conditionals(self):
        d = DiscreteDataset([1.0, 2.0, 3.0, 4.0], [0, 1, 0, 1], [0, 0, 1, 1], 1, 2)
        np.testing.assert_array_equal(build_contrasts(group_stats(d)).A, [[0.0]])

    def test_empty_group_named(self):
        d = DiscreteDataset([1.0, 2.0], [0, 1], [0, 1], 1, 3)
        with pytest.raises(EmptyGroupError, match=r"\(0, 2\)"):
            build_contrasts(group_stats(d))
        assert build_contrasts(group_stats(d), [(0, 1)]).A.shape == (1, 1)

    def test_matches_population_oracle(self):
        model = sim.random_discrete_scm(7, 1, 3)
        rep = sim.exact_population_oracle(model)
        d = sim.simulate_discrete(model, 100_000, seed=11)
        s = group_stats(d)
        sys_ = build_contrasts(s)
        for r, (i, k) in enumerate(sys_.pair_labels):
            env = 5 * np.sqrt(1 / min(s.group_counts[i], s.group_counts[k]))
            assert abs(sys_.A[r, 0] - rep.A_pop[r, 0]) <= env
            assert abs(sys_.b[r] - rep.b_pop[r]) <= env * np.sqrt(d.y.var())

    def test_rows_are_probability_differences(self, rng):
        d = DiscreteDataset(rng.normal(size=500), rng.integers(0, 3, 500), rng.integers(0, 4, 500), 2, 4)
        A = build_contrasts(group_stats(d)).A
        assert A.shape == (6, 2) and np.all(np.abs(A) <= 1)


class TestRank:
    @pytest.mark.parametrize("A, rank", [([[1.0]], 1), ([[1.0], [1.0]], 1), ([[0.0]], 0),
                                         ([[1.0, 2.0], [2.0, 4.0]], 1), ([[1.0, 0.0], [0.0, 1.0]], 2)])
    def test_examples(self, A, rank):
        assert check_rank(system(A, np.zeros(len(A)))).rank == rank

    def test_relative_tolerance(self):
        assert check_rank(system([[1.0, 0.0], [0.0, 1e-9]], [0, 0])).rank == 1
        assert check_rank(system([[1.0, 0.0], [0.0, 1e-7]], [0, 0])).rank == 2


class TestSolve:
    def test_unit_denominator(self):
        assert solve_theta(system([[1.0]], [0.7])).theta == pytest.approx([0.7])

    def test_ratio(self):
        assert solve_theta(system([[0.5]], [1.0])).theta == pytest.approx([2.0])

    def test_duplicate_rows(self):
        est = solve_theta(system([[1.0], [1.0]], [2.0, 2.0]))
        assert est.theta == pytest.approx([2.0]) and est.residual_norm == pytest.approx(0.0)

    def test_underidentified_null_space(self):
        with pytest.raises(UnderidentifiedError) as info:
            solve_theta(system([[1.0, 1.0]], [1.0]))
        ns = info.value.null_space
        assert ns.shape == (2, 1)
        np.testing.assert_allclose(abs(ns[:, 0]), [np.sqrt(0.5)] * 2, atol=1e-12)
        assert info.value.rank == 1

    def test_zero_matrix(self):
        with pytest.raises(UnderidentifiedError):
            solve_theta(system([[0.0]], [1.0]))

    def test_weak_instrument_warning(self):
        with pytest.warns(IVWarning, match="weak instrument"):
            est = solve_theta(system([[1.0, 0.0], [0.0, 1e-7]], [1.0, 1e-7]))
        assert est.cond_number == pytest.approx(1e7)
        np.testing.assert_allclose(est.theta, [1.0, 1.0])

    def test_misfit_warning(self):
        with pytest.warns(IVWarning, match="misspecification"):
            solve_theta(system([[1.0], [1.0]], [1.0, 2.0], se=np.array([0.01, 0.01])))

    def test_weighted(self):
        est = solve_theta(system([[1.0], [1.0]], [1.0, 2.0], se=np.array([1.0, 1e-3])), weighted=True)
        assert est.theta[0] == pytest.approx(2.0, abs=1e-5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 3), st.integers(2, 5))
    def test_population_correctness(self, seed, n, m):
        rep = sim.exact_population_oracle(sim.random_discrete_scm(seed, n, m))
        if check_rank(system(rep.A_pop, rep.b_pop)).rank < n:
            return
        np.testing.assert_allclose(solve_theta(ContrastSystem(rep.A_pop, rep.b_pop, rep.pairs)).theta,
                                   rep.theta_true, atol=1e-10)


class TestInvariants:
    @pytest.fixture
    def data(self):
        model = sim.random_discrete_scm(3, 2, 4)
        return sim.simulate_discrete(model, 20_000, seed=5)

    def test_enlarging_pairs_never_lowers_rank(self, data):
        s = group_stats(data)
        all_pairs = list(PairSet.all_pairs(4))
        for size in range(1, len(all_pairs)):
            assert check_rank(build_contrasts(s, all_pairs[:size])).rank <= \
                check_rank(build_contrasts(s, all_pairs[:size + 1])).rank

    def test_relabel_equivariance(self, data, quiet):
        swap = np.array([0, 2, 1])
        relabelled = DiscreteDataset(data.y, swap[data.x], data.z, data.n, data.m)
        np.testing.assert_allclose(estimate(relabelled).theta, estimate(data).theta[::-1], atol=1e-10)

    @pytest.mark.parametrize("shift, scale", [(5.0, 1.0), (0.0, -3.0), (2.0, 0.5)])
    def test_location_scale(self, data, quiet, shift, scale):
        moved = DiscreteDataset(scale * data.y + shift, data.x, data.z, data.n, data.m)
        np.testing.assert_allclose(estimate(moved).theta, scale * estimate(data).theta, atol=1e-9)


class TestEstimate:
    def test_perfect_compliance_recovers_effect(self):
        model = perfect_compliance_model()
        assert model.theta() == pytest.approx([1.5])
        d = sim.simulate_discrete(model, 100_000, seed=1)
        est = estimate(d, bootstrap=200, seed=2)
        assert abs(est.theta[0] - 1.5) <= 3 * est.boot_se[0]
        assert est.boot_ci[0, 0] < est.theta[0] < est.boot_ci[0, 1]

    def test_engineered_identity_holds(self):
        model = sim.example3_engineered(theta=1.5, cond_i_corr=0.0)
        d = sim.simulate_discrete(model, 100_000, seed=3)
        est = estimate(d, bootstrap=200, seed=4)
        assert abs(est.theta[0] - 1.5) <= 3 * est.boot_se[0]

    def test_engineered_violation_detected(self):
        model = sim.example3_engineered(theta=1.5, cond_i_corr=0.5)
        rep = sim.exact_population_oracle(model)
        limit = rep.b_pop[0] / rep.A_pop[0, 0]
        d = sim.simulate_discrete(model, 100_000, seed=3)
        est = estimate(d, bootstrap=200, seed=4)
        assert abs(est.theta[0] - 1.5) > 5 * est.boot_se[0]
        assert abs(est.theta[0] - limit) <= 3 * est.boot_se[0]

    def test_bootstrap_deterministic(self):
        d = sim.simulate_discrete(perfect_compliance_model(), 2000, seed=1)
        a, b = estimate(d, bootstrap=50, seed=9), estimate(d, bootstrap=50, seed=9)
        np.testing.assert_array_equal(a.boot_ci, b.boot_ci)

    def test_bootstrap_counts(self):
        w = bootstrap_counts(100, 0, 3)
        assert w.sum() == 100 and np.array_equal(w, bootstrap_counts(100, 0, 3))
        assert not np.array_equal(w, bootstrap_counts(100, 0, 4))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            estimate(DiscreteDataset([], [], [], 1, 2))

    def test_spanning_option(self, quiet):
        d = sim.simulate_discrete(sim.random_discrete_scm(3, 1, 4), 5000, seed=0)
        assert estimate(d, s0="spanning").extra["pairs"] == [[0, 1], [0, 2], [0, 3]]

    def test_to_dict_is_plain(self, quiet):
        import json
        d = sim.simulate_discrete(perfect_compliance_model(), 2000, seed=1)
        json.dumps(estimate(d, bootstrap=20, seed=0).to_dict())

    def test_naive_is_confounded(self):
        d = sim.simulate_discrete(sim.example3_engineered(theta=1.5), 100_000, seed=3)
        assert naive_difference(d)[0] > 1.5 + 0.5
