import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicHermiteSpline

from ivcalc import npreg
from ivcalc.errors import InsufficientDataError, IVWarning
from ivcalc.rng import substream
from ivcalc.scm_sim import example2_scm, simulate_mixed


def direct_local_poly(x, y, grid, h, degree):
    """Reference fit: per-point weighted least squares with the biweight."""
    vals, ders = [], []
    for p in grid:
        u = (x - p) / h
        w = np.where(np.abs(u) < 1, (1 - u**2) ** 2, 0.0)
        X = np.vander(x - p, degree + 1, increasing=True)
        sw = np.sqrt(w)
        beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        vals.append(beta[0])
        ders.append(beta[1])
    return np.array(vals), np.array(ders)


def brute_force_cv(x, y, cands, degree=2, folds=5, seed=0):
    fold = substream(seed, 0).permutation(len(x)) % folds
    out = np.zeros(len(cands))
    for f in range(folds):
        tr, te = fold != f, fold == f
        g = npreg.default_grid(x[tr])
        inside = (x[te] >= g[0]) & (x[te] <= g[-1])
        for c, h in enumerate(cands):
            v, d = direct_local_poly(x[tr], y[tr], g, h, degree)
            out[c] += ((CubicHermiteSpline(g, v, d)(x[te][inside]) - y[te][inside]) ** 2).sum()
    return out


class TestGridsAndTypes:
    def test_default_grid_trims(self):
        g = npreg.default_grid(np.array([0.0, 10.0]))
        assert len(g) == 101 and g[0] == pytest.approx(0.25) and g[-1] == pytest.approx(9.75)

    def test_regression_fit_validation(self):
        with pytest.raises(ValueError):
            npreg.RegressionFit(np.zeros(2), np.zeros(2), np.zeros(2), 0.0, 1)
        with pytest.raises(ValueError):
            npreg.RegressionFit(np.zeros(2), np.zeros(2), np.zeros(2), 1.0, 0)

    def test_candidates(self):
        c = npreg.candidate_bandwidths(np.array([0.0, 2.0]))
        assert len(c) == 10 and c[0] == pytest.approx(0.1) and c[-1] == pytest.approx(1.0)


class TestLocalPoly:
    x = np.linspace(0, 1, 400)

    def test_affine_reproduced_by_local_linear(self):
        fit = npreg.fit_local_poly(self.x, 2 * self.x + 1, degree=1, bandwidth=0.1)
        np.testing.assert_allclose(fit.values, 2 * fit.grid + 1, atol=1e-8)
        np.testing.assert_allclose(fit.derivs, 2.0, atol=1e-8)

    def test_quadratic_reproduced_by_local_quadratic(self):
        fit = npreg.fit_local_poly(self.x, self.x**2, degree=2, bandwidth=0.1)
        np.testing.assert_allclose(fit.derivs, 2 * fit.grid, atol=1e-8)
        np.testing.assert_allclose(fit.values, fit.grid**2, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(1, 2), st.floats(0.05, 0.4),
           st.integers(0, 2**31))
    def test_polynomial_reproduction(self, coef, degree, h, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, 300)
        c = np.array(coef)
        c[degree + 1:] = 0.0
        y = c[0] + c[1] * x + c[2] * x**2
        grid = np.linspace(-0.8, 0.8, 17)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IVWarning)
            fit = npreg.fit_local_poly(x, y, degree, h, grid)
        v = fit.valid
        scale = 1 + np.abs(c).sum()
        np.testing.assert_allclose(fit.values[v], (c[0] + c[1] * grid + c[2] * grid**2)[v], atol=1e-8 * scale)
        np.testing.assert_allclose(fit.derivs[v], (c[1] + 2 * c[2] * grid)[v], atol=1e-7 * scale / h)

    def test_matches_direct_weighted_least_squares(self, rng):
        x = rng.uniform(0, 1, 500)
        y = np.cos(3 * x) + rng.normal(0, 0.3, 500)
        grid = np.linspace(0.1, 0.9, 9)
        fit = npreg.fit_local_poly(x, y, 2, 0.2, grid)
        v, d = direct_local_poly(x, y, grid, 0.2, 2)
        np.testing.assert_allclose(fit.values, v, atol=1e-10)
        np.testing.assert_allclose(fit.derivs, d, atol=1e-9)

    def test_sparse_region_masked_with_warning(self):
        x = np.concatenate([np.linspace(0, 0.3, 100), np.linspace(0.7, 1, 100)])
        with pytest.warns(IVWarning, match="masked"):
            fit = npreg.fit_local_poly(x, x, 2, 0.1, np.array([0.1, 0.5, 0.9]))
        assert fit.valid.tolist() == [True, False, True]
        assert np.isnan(fit.values[1])

    def test_sample_order_invariance(self, rng):
        x = rng.uniform(0, 1, 1000)
        y = np.sin(4 * x) + rng.normal(0, 0.1, 1000)
        p = rng.permutation(1000)
        a = npreg.fit_local_poly(x, y, 2, 0.15)
        b = npreg.fit_local_poly(x[p], y[p], 2, 0.15)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)
        np.testing.assert_allclose(a.derivs, b.derivs, atol=1e-10)

    def test_weights_equal_replication(self, rng):
        x = rng.uniform(0, 1, 300)
        y = x**3 + rng.normal(0, 0.1, 300)
        w = rng.integers(0, 3, 300)
        a = npreg.fit_local_poly(x, y, 2, 0.2, weights=w.astype(float))
        b = npreg.fit_local_poly(np.repeat(x, w), np.repeat(y, w), 2, 0.2, grid=a.grid)
        np.testing.assert_allclose(a.derivs, b.derivs, atol=1e-9)


class TestSinScenario:
    @pytest.fixture(scope="class")
    @staticmethod
    def fit():
        r = np.random.default_rng(2024)
        x = r.uniform(0, 1, 50_000)
        y = np.sin(4 * x) + r.normal(0, 0.1, len(x))
        return npreg.fit_local_poly(x, y)

    def test_derivative_rmse(self, fit):
        inner = npreg.inner_mask(fit.grid, 0.8)
        rmse = np.sqrt(np.mean((fit.derivs[inner] - 4 * np.cos(4 * fit.grid[inner])) ** 2))
        assert rmse < 0.15

    @pytest.mark.xfail(strict=True, reason="degree-2 slope bias of about 0.11 at the CV bandwidth exceeds 0.05")
    def test_derivs_consistent_with_differenced_values(self, fit):
        spacing = fit.grid[1] - fit.grid[0]
        fd = np.gradient(fit.values, fit.grid)
        inner = npreg.inner_mask(fit.grid, 0.8)
        assert np.max(np.abs(fd[inner] - fit.derivs[inner])) <= max(0.05, 5 * spacing)

    @pytest.mark.parametrize("h", [0.05, 0.1, 0.18])
    def test_slope_bias_matches_kernel_moments(self, h):
        # values carry O(h^4) bias and slopes O(h^2); for the biweight the slope
        # bias is h^2 f'''(x) mu4 / (6 mu2) with mu4 / mu2 = 1/3
        x = np.linspace(0, 1, 20_001)
        fit = npreg.fit_local_poly(x, np.sin(4 * x), 2, h)
        inner = npreg.inner_mask(fit.grid, 0.6)
        bias = fit.derivs - 4 * np.cos(4 * fit.grid)
        predicted = -64 * np.cos(4 * fit.grid) * h**2 / 18
        assert np.max(np.abs(bias - predicted)[inner]) <= 0.02 * np.max(np.abs(predicted))

    @pytest.mark.parametrize("h", [0.03, 0.05])
    def test_consistency_on_noiseless_target(self, h):
        x = np.linspace(0, 1, 20_001)
        fit = npreg.fit_local_poly(x, np.sin(4 * x), 2, h)
        spacing = fit.grid[1] - fit.grid[0]
        fd = (fit.values[2:] - fit.values[:-2]) / (2 * spacing)
        assert np.max(np.abs(fd - fit.derivs[1:-1])) <= max(0.05, 5 * spacing)


class TestBandwidthSelection:
    def test_scores_match_brute_force(self, rng):
        x = rng.uniform(0, 1, 300)
        y = np.sin(6 * x) + 0.2 * rng.normal(size=300)
        cv = npreg.cv_scores(x, y, 2)
        ref = brute_force_cv(x, y, cv.candidates)
        np.testing.assert_allclose(cv.scores[:, 0], ref, rtol=1e-9)

    @pytest.mark.parametrize("seed", range(6))
    def test_pure_noise_selects_largest(self, seed):
        # brute-force CV scores put the minimum at the largest candidate for
        # each of these samples
        r = np.random.default_rng(seed)
        x, y = r.uniform(0, 1, 300), r.normal(size=300)
        c = npreg.candidate_bandwidths(x)
        assert npreg.select_bandwidth_cv(x, y) == c[-1]

    @pytest.mark.parametrize("seed", range(5))
    def test_one_se_rule_on_noise(self, seed):
        r = np.random.default_rng(100 + seed)
        x, y = r.uniform(0, 1, 2000), r.normal(size=2000)
        assert npreg.select_bandwidth_cv(x, y, rule="1se") == npreg.candidate_bandwidths(x)[-1]

    def test_one_se_never_smaller_than_min(self, rng):
        x = rng.uniform(0, 1, 1000)
        y = np.sin(8 * x) + 0.3 * rng.normal(size=1000)
        assert npreg.select_bandwidth_cv(x, y, rule="1se") >= npreg.select_bandwidth_cv(x, y)

    def test_single_candidate(self, rng):
        assert npreg.select_bandwidth_cv(rng.uniform(size=50), rng.normal(size=50), candidate_grid=[0.3]) == 0.3

    def test_deterministic(self, rng):
        x, y = rng.uniform(size=500), rng.normal(size=500)
        assert npreg.select_bandwidth_cv(x, y, seed=4) == npreg.select_bandwidth_cv(x, y, seed=4)

    def test_ties_go_to_larger(self):
        cands = np.array([0.1, 0.2, 0.3])
        assert npreg._pick(cands, np.array([1.0, 1.0, 2.0]), np.zeros(3), 10, "min") == 0.2

    def test_all_candidates_fail(self, rng):
        x = np.concatenate([np.zeros(30), np.ones(30)]) + rng.uniform(0, 1e-3, 60)
        with pytest.raises(InsufficientDataError):
            npreg.select_bandwidth_cv(x, rng.normal(size=60), candidate_grid=[0.01, 0.02])

    def test_too_few_points(self):
        with pytest.raises(InsufficientDataError):
            npreg.select_bandwidth_cv(np.arange(10.0), np.arange(10.0), candidate_grid=[1.0, 2.0])

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            npreg.select_bandwidth_cv(np.arange(30.0), np.arange(30.0), rule="max")


class TestMulticlass:
    def test_constant_class(self, rng, quiet):
        z = rng.uniform(size=500)
        fit = npreg.fit_multiclass_probs(z, np.ones(500, dtype=int), 0.2, n=1)
        np.testing.assert_allclose(fit.probs[:, 1], 1.0)
        np.testing.assert_allclose(fit.dprobs, 0.0)
        assert fit.empty_classes == (0,)

    def test_example2_probability_curve(self):
        d = simulate_mixed(example2_scm(), 100_000, seed=1)
        fit = npreg.fit_multiclass_probs(d.z, d.x, n=1)
        inner = npreg.inner_mask(fit.grid, 0.8)
        assert np.max(np.abs(fit.probs[inner, 1] - (1 + fit.grid[inner]) / 2)) <= 0.02
        assert np.max(np.abs(fit.dprobs[inner, 1] - 0.5)) <= 0.1

    def test_label_swap(self, rng):
        z = rng.uniform(size=2000)
        x = (rng.uniform(size=2000) < 0.3 + 0.4 * z).astype(int)
        a = npreg.fit_multiclass_probs(z, x, 0.25, n=1)
        b = npreg.fit_multiclass_probs(z, 1 - x, 0.25, n=1)
        np.testing.assert_allclose(a.probs, b.probs[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(a.dprobs, b.dprobs[:, ::-1], atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 3))
    def test_simplex_rows(self, seed, n):
        r = np.random.default_rng(seed)
        z = r.uniform(size=600)
        x = np.minimum((r.uniform(size=600) * (n + 1) * (0.5 + z)).astype(int), n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IVWarning)
            fit = npreg.fit_multiclass_probs(z, x, 0.15, n=n)
        v = fit.valid
        np.testing.assert_allclose(fit.probs[v].sum(axis=1), 1.0, atol=1e-9)
        assert np.all((fit.probs[v] >= 0) & (fit.probs[v] <= 1))
        np.testing.assert_allclose(fit.dprobs[v].sum(axis=1), 0.0, atol=1e-9)

    def test_simplex_projection_chain_rule(self, rng):
        raw = rng.uniform(-0.2, 1.2, (50, 3))
        draw = rng.normal(size=(50, 3))
        eps = 1e-7
        q0, dq = npreg._simplex(raw, draw)
        q1, _ = npreg._simplex(raw + eps * draw, draw)
        np.testing.assert_allclose((q1 - q0) / eps, dq, atol=1e-5)


class TestCondDensity:
    def test_degenerate_conditional(self, rng):
        z = rng.uniform(size=5000)
        k = npreg.fit_cond_density(z, z, x_grid=np.linspace(0, 1, 201), z_grid=np.array([0.3, 0.6]))
        # |x - z| <= |x - X_i| + |Z_i - z| bounds the support by the summed bandwidths
        reach = k.bandwidths[0] + k.bandwidths[1] + (k.x_grid[1] - k.x_grid[0])
        for j, zz in enumerate(k.z_grid):
            mass = k.widths * k.K[:, j]
            assert mass[np.abs(k.x_grid - zz) > reach].sum() == 0.0
            assert abs(mass @ k.x_grid / mass.sum() - zz) < 0.01

    def test_gaussian_noise_column_moments(self):
        r = np.random.default_rng(3)
        z = r.uniform(-1, 1, 100_000)
        x = z + r.normal(0, 0.5, len(z))
        k = npreg.fit_cond_density(x, z, x_grid=np.linspace(-3, 3, 241), z_grid=np.array([-0.5, 0.0, 0.5]))
        col = k.K[:, 1] * k.widths
        mean = col @ k.x_grid
        sd = np.sqrt(col @ (k.x_grid - mean) ** 2)
        assert abs(mean) <= 0.05 and abs(sd - 0.5) <= 0.05

    def test_columns_normalised_and_nonnegative(self, rng):
        z = rng.uniform(size=3000)
        x = z**2 + rng.normal(0, 0.2, 3000)
        k = npreg.fit_cond_density(x, z)
        assert np.all(k.K >= 0)
        np.testing.assert_allclose(k.widths @ k.K[:, k.valid], 1.0, atol=2e-2)

    def test_low_density_columns_masked(self, rng):
        z = rng.uniform(size=1000)
        k = npreg.fit_cond_density(z, z, z_grid=np.array([0.5, 5.0]))
        assert k.valid.tolist() == [True, False]

    def test_needs_data(self):
        with pytest.raises(InsufficientDataError):
            npreg.fit_cond_density(np.arange(10.0), np.arange(10.0))


class TestMultivariate:
    def test_affine_exact(self, rng):
        Z = rng.uniform(size=(3000, 2))
        Y = np.column_stack([1 + 2 * Z[:, 0] - 3 * Z[:, 1], Z[:, 0] + Z[:, 1]])
        grid = npreg.tensor_grid(Z, 5)
        vals, grads, valid = npreg.local_linear_nd(Z, Y, [0.3, 0.3], grid)
        assert valid.all()
        np.testing.assert_allclose(grads[:, :, 0], np.tile([2.0, -3.0], (25, 1)), atol=1e-9)
        np.testing.assert_allclose(grads[:, :, 1], 1.0, atol=1e-9)
        np.testing.assert_allclose(vals[:, 0], 1 + 2 * grid[:, 0] - 3 * grid[:, 1], atol=1e-9)

    def test_nd_bandwidths_deterministic(self, rng):
        Z = rng.uniform(size=(600, 2))
        y = Z.sum(axis=1) + rng.normal(0, 0.1, 600)
        a = npreg.select_bandwidths_nd(Z, y, seed=1)
        np.testing.assert_array_equal(a, npreg.select_bandwidths_nd(Z, y, seed=1))
        assert a.shape == (2,) and np.all(a > 0)


class TestBatchedEngine:
    def test_fit_many_matches_individual_fits(self, rng):
        x = rng.uniform(0, 1, 2000)
        Y = np.column_stack([np.sin(3 * x), x**2]) + rng.normal(0, 0.1, (2000, 2))
        grid = npreg.default_grid(x)
        eng = npreg.prepare_local_poly(x, Y, 2, 0.1)
        W = rng.integers(0, 3, (4, 2000)).astype(float)
        (va, da, oka), (vb, db, okb) = eng.fit_many(grid, [0.1, 0.2], W)
        for k in range(4):
            v1, d1, ok1, _ = npreg.local_poly(x, Y, 2, 0.1, grid, W[k])
            np.testing.assert_allclose(da[k], d1, atol=1e-9)
            np.testing.assert_array_equal(oka[k], ok1)
            v2, d2, _, _ = npreg.local_poly(x, Y, 2, 0.2, grid, W[k])
            np.testing.assert_allclose(db[k], d2, atol=1e-9)
