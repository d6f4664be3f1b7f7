import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivcalc import scm_sim as sim
from ivcalc.dataset import group_stats
from ivcalc.discrete_iv import ContrastSystem, solve_theta
from ivcalc.errors import ModelError


def ols_slope(x, y):
    xc = x - x.mean()
    return xc @ (y - y.mean()) / (xc @ xc)


class TestDiscreteScm:
    def test_validation(self):
        with pytest.raises(ModelError):
            sim.DiscreteScm([0.5, 0.5], [0.5, 0.6], [[0, 1], [0, 1]], [[0, 1], [0, 1]])
        with pytest.raises(ModelError, match="X codes"):
            sim.DiscreteScm([0.5, 0.5], [1.0], [[0, 1]], [[0, 2]])
        with pytest.raises(ModelError, match="one entry per Z level"):
            sim.DiscreteScm([0.5, 0.5], [1.0], [[0, 1]], [[0, 1, 1]])

    def test_empty_sample(self):
        d = sim.simulate_discrete(sim.example3_scm({"complier": 1.0}), 0, seed=1)
        assert len(d) == 0

    def test_seed_determinism(self):
        m = sim.example3_engineered()
        a, b = sim.simulate_discrete(m, 500, seed=3), sim.simulate_discrete(m, 500, seed=3)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.z, b.z)

    def test_degenerate_outcomes(self):
        m = sim.example3_scm({"never": 0.3, "complier": 0.4, "always": 0.3})
        d = sim.simulate_discrete(m, 10_000, seed=0)
        assert set(np.unique(d.y)) <= {0.0, 1.0}
        assert d.y[d.x == 1].mean() == 1.0


class TestOracle:
    def test_constant_outcomes(self):
        m = sim.DiscreteScm.from_atoms([0.3, 0.7], [(0.4, (2.0, 5.0, -1.0), (0, 1)),
                                                    (0.6, (2.0, 5.0, -1.0), (2, 1))])
        rep = sim.exact_population_oracle(m)
        np.testing.assert_array_equal(rep.theta_true, [3.0, -3.0])
        assert rep.identity_residual == 0.0

    def test_perfect_compliance(self):
        rep = sim.exact_population_oracle(sim.example3_scm({"complier": 1.0}))
        np.testing.assert_array_equal(rep.A_pop, [[1.0]])

    def test_independent_effects_satisfy_identity(self):
        rep = sim.exact_population_oracle(sim.example3_engineered(theta=1.5))
        assert rep.cond_i_corr <= 1e-12
        assert rep.identity_residual <= 1e-12
        np.testing.assert_allclose(rep.A_pop, [[0.6]], atol=1e-15)
        np.testing.assert_allclose(rep.b_pop, [0.9], atol=1e-14)

    def test_engineered_violation_gap(self):
        # gap = P(complier)(1 - P(complier)) * shift with
        # shift = rho sigma / sqrt(pc (1 - pc) (1 - rho^2))
        pc, rho = 0.6, 0.5
        gap = pc * (1 - pc) * rho / np.sqrt(pc * (1 - pc) * (1 - rho**2))
        rep = sim.exact_population_oracle(sim.example3_engineered(theta=1.5, cond_i_corr=rho))
        assert rep.cond_i_corr == pytest.approx(rho, abs=1e-12)
        assert rep.identity_residual == pytest.approx(gap, abs=1e-12)
        np.testing.assert_allclose(rep.cond_i_cov.sum(axis=1), rep.b_pop - rep.A_pop @ rep.theta_true, atol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 3), st.integers(2, 5))
    def test_identity_for_random_models(self, seed, n, m):
        model = sim.random_discrete_scm(seed, n, m)
        rep = sim.exact_population_oracle(model)
        assert rep.identity_residual <= 1e-12
        A = rep.A_pop
        if np.linalg.matrix_rank(A, tol=1e-8 * max(np.linalg.norm(A, 2), 1e-300)) == n:
            est = solve_theta(ContrastSystem(A, rep.b_pop, rep.pairs))
            np.testing.assert_allclose(est.theta, rep.theta_true, atol=1e-10)

    def test_sample_contrasts_converge(self):
        model = sim.random_discrete_scm(7, 1, 3)
        rep = sim.exact_population_oracle(model)
        d = sim.simulate_discrete(model, 100_000, seed=11)
        s = group_stats(d)
        for r, (i, k) in enumerate(rep.pairs):
            env = 5 * np.sqrt(1 / min(s.group_counts[i], s.group_counts[k]))
            assert abs(s.cond_prob_x[k, 1] - s.cond_prob_x[i, 1] - rep.A_pop[r, 0]) <= env


class TestMixedScm:
    def test_example2_curves(self):
        m = sim.example2_scm(1, 2, 0, 1, corr=0.5)
        z = np.linspace(0, 1, 11)
        np.testing.assert_allclose(m.q(z)[:, 1], (1 + z) / 2, atol=1e-15)
        np.testing.assert_allclose(m.a_curves(z)[:, 0], 0.5, atol=1e-15)
        np.testing.assert_allclose(m.b_curve(z), 1.0, atol=1e-12)
        assert m.theta().tolist() == [2.0]
        assert m.cond_i_holds()

    def test_b_curve_is_derivative_of_mu(self):
        for m in (sim.multiclass_scm(), sim.multiclass_scm(violate=0.3), sim.example2_scm()):
            z = np.linspace(0.05, 0.95, 19)
            h = 1e-5
            fd = (m.mu(z + h) - m.mu(z - h)) / (2 * h)
            np.testing.assert_allclose(m.b_curve(z), fd, atol=1e-7)

    def test_single_class_always_taken(self):
        q = lambda z: np.column_stack([np.zeros(len(z)), np.ones(len(z))])
        dq = lambda z: np.zeros((len(z), 2))
        R = np.eye(3)
        m = sim.MixedScm(sim.ZLaw(), q, dq, np.array([0.0, 4.0]), np.array([1.0, 0.5]), R)
        d = sim.simulate_mixed(m, 5000, seed=0)
        assert np.all(d.x == 1)
        assert d.y.mean() == pytest.approx(4.0, abs=4 * 0.5 / np.sqrt(5000))

    def test_rejects_non_simplex_curves(self):
        q = lambda z: np.column_stack([0.6 * np.ones(len(z)), 0.6 * np.ones(len(z))])
        dq = lambda z: np.zeros((len(z), 2))
        with pytest.raises(ModelError, match="probability"):
            sim.MixedScm(sim.ZLaw(), q, dq, np.zeros(2), np.ones(2), np.eye(3))

    def test_rejects_bad_correlation(self):
        with pytest.raises(ModelError):
            sim.example2_scm(corr=1.0)

    def test_example2_participation_rate(self):
        d = sim.simulate_mixed(sim.example2_scm(), 100_000, seed=5)
        win = (d.z >= 0.45) & (d.z <= 0.55)
        p = d.x[win].mean()
        se = np.sqrt(0.75 * 0.25 / win.sum())
        assert abs(p - 0.75) <= 3 * se

    def test_sample_mean_tracks_mu(self):
        m = sim.multiclass_scm(violate=0.3)
        d = sim.simulate_mixed(m, 200_000, seed=2)
        for lo in (0.1, 0.5, 0.8):
            win = (d.z >= lo) & (d.z < lo + 0.05)
            ref = m.mu(np.array([lo + 0.025]))[0]
            assert abs(d.y[win].mean() - ref) < 4 * d.y[win].std() / np.sqrt(win.sum()) + 0.02

    def test_seed_determinism(self):
        m = sim.example2_scm()
        np.testing.assert_array_equal(sim.simulate_mixed(m, 300, 9).y, sim.simulate_mixed(m, 300, 9).y)

    def test_cond_i_diagnostic(self):
        probes = [(0.3, 0.05), (0.6, 0.05)]
        ok = sim.mixed_cond_i_diagnostic(sim.multiclass_scm(), probes, seed=1)
        bad = sim.mixed_cond_i_diagnostic(sim.multiclass_scm(violate=0.3), probes, seed=1)
        assert not sim.multiclass_scm(violate=0.3).cond_i_holds()
        assert bad > 4 * ok

    @pytest.mark.parametrize("rho", [-0.6, 0.0, 0.3, 0.9])
    def test_copula_conversion_round_trip(self, rho):
        from scipy import stats
        r = sim.copula_from_rank_corr(rho)
        g = np.random.default_rng(0).multivariate_normal([0, 0], [[1, r], [r, 1]], size=200_000)
        assert stats.spearmanr(g[:, 0], g[:, 1])[0] == pytest.approx(rho, abs=0.01)


class TestContinuousScm:
    @pytest.mark.parametrize("build", [sim.example1_scm, sim.example4_scm, sim.example5_scm,
                                       sim.cond_ii_violation_scm, sim.vector_linear_scm])
    def test_analytic_derivatives(self, build):
        assert sim.check_derivatives(build(), seed=3) <= 1e-4

    def test_wrong_derivative_detected(self):
        m = sim.example4_scm(s=lambda x: x**2, s_prime=lambda x: 3 * x)
        with pytest.raises(ModelError):
            sim.check_derivatives(m)

    def test_constant_outcome_has_zero_phi(self):
        m = sim.example4_scm(s=lambda x: 0 * x, s_prime=lambda x: 0 * x)
        _, b, phi = sim.population_curves(m, np.linspace(-1, 1, 5), n_mc=2000)
        assert np.all(phi == 0) and np.all(b == 0)

    def test_example1_slopes(self):
        d = sim.simulate_continuous(sim.example1_scm(beta=2, alpha=1), 100_000, seed=8)
        z, x, y = d.z[:, 0], d.x[:, 0], d.y
        # slope SEs: sd(residual) / (sd(z) sqrt(N)) with sd(z) = 1/sqrt(3)
        assert ols_slope(z, x) == pytest.approx(1.0, abs=3 * np.hypot(0.5, 0.5) * np.sqrt(3 / 1e5))
        assert ols_slope(z, y) == pytest.approx(2.0, abs=3 * np.hypot(1.0, 0.5) * np.sqrt(3 / 1e5))

    def test_example1_truth(self):
        t = sim.example1_scm(beta=2, alpha=1, noise_sds=(0.5, 0.5, 0.5)).truth
        var_xt = 4 / 12 + 0.25
        assert t["attenuation"] == pytest.approx(var_xt / (var_xt + 0.25))
        assert t["naive_slope"] == pytest.approx(2 * t["attenuation"])

    def test_example4_phi_truth(self):
        m = sim.example4_scm(noise_sds=(1.0, 0.5), corr=0.0)
        z = np.linspace(-1, 1, 9)
        np.testing.assert_allclose(m.truth["phi_fn"](z), 2 * z, atol=1e-12)
        _, _, phi = sim.population_curves(m, z, n_mc=200_000, seed=1)
        np.testing.assert_allclose(phi[:, 0], 2 * z, atol=0.01)

    def test_example4_cubic_phi(self):
        # E(3 (z + U)^2) = 3 z^2 + 3 sd^2
        m = sim.example4_scm(s=lambda x: x**3, s_prime=lambda x: 3 * x**2, noise_sds=(1, 0.5))
        z = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(m.truth["phi_fn"](z), 3 * z**2 + 0.75, atol=1e-12)

    def test_vector_population_curves(self):
        m = sim.vector_linear_scm(effect=3.0)
        a, b, phi = sim.population_curves(m, [[0.2, 0.4], [0.7, 0.1]], n_mc=1000)
        np.testing.assert_allclose(a, 1.0)
        np.testing.assert_allclose(b, 3.0)
        np.testing.assert_allclose(phi, 3.0)

    def test_condition_ii_violation_gap(self):
        m = sim.cond_ii_violation_scm(u1_law=(1.0, 0.5))
        a, b, phi = sim.population_curves(m, [0.5], n_mc=400_000, seed=2)
        assert b[0, 0] / a[0, 0, 0] == pytest.approx(m.truth["b_over_a"], rel=0.01)
        assert abs(b[0, 0] - a[0, 0, 0] * phi[0, 0]) > 0.2

    def test_out_of_bounds_x_raises(self):
        m = sim.example1_scm()
        tight = sim.ContinuousScm(m.f_map, m.g_map, m.u_law, m.p_z, ((-0.1, 0.1),), m.z_bounds)
        with pytest.raises(ModelError, match="bounds"):
            sim.simulate_continuous(tight, 100, seed=0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31))
    def test_outputs_are_valid_datasets(self, seed):
        for m in (sim.example1_scm(), sim.example5_scm()):
            d = sim.simulate_continuous(m, 200, seed)
            assert len(d) == 200 and d.x.shape == (200, 1)
        d = sim.simulate_mixed(sim.multiclass_scm(), 200, seed)
        assert d.x.max() <= 2 and 0 <= d.z.min()

    def test_seed_determinism(self):
        m = sim.example5_scm()
        np.testing.assert_array_equal(sim.simulate_continuous(m, 100, 4).y, sim.simulate_continuous(m, 100, 4).y)
