"""Effects of a continuous treatment with a continuous instrument.

For Y = f(X, U), X = g(Z, U) with Z independent of U, the derivative curves
a(z) = d E(X | Z = z)/dz and b(z) = d E(Y | Z = z)/dz satisfy
a(z) phi(z) = b(z) where phi(z) = E(df/dx | Z = z).  This module estimates phi
pointwise, recovers s' in additive models Y = s(X) + U by a regularised
first-kind integral equation, averages phi for constant-effect models, and
provides the classic ratio of linear slopes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .dataset import ContinuousDataset
from .discrete_iv import bootstrap_counts, percentile_summary
from .errors import InsufficientDataError, IVWarning, RegimeMismatchError, WeakInstrumentError
from .npreg import (CondDensityKernel, default_grid, fit_cond_density, local_linear_nd, local_poly,
                    prepare_local_poly,
                    select_bandwidth_cv, select_bandwidths_nd, tensor_grid)

DENOM_TOL = 0.1
RANK_TOL = 0.1
MIN_VALID = 10
MAX_DROP = 0.5
LCURVE_POINTS = 20
BOOT_CHUNK = 50
# derivative targets favour the smoother end of the CV-indistinguishable set
CV_RULE = "1se"

# reason codes for masked points
OK = ""
WEAK = "weak-denominator"
RANK = "rank-deficient"
BOUNDARY = "boundary"


@dataclass
class PhiCurve:
    """phi on a grid of instrument values.

    Scalar case: ``grid`` (G,), ``phi`` (G,), ``a_vals`` (G,), ``b_vals`` (G,).
    Vector case: ``grid`` (G, m), ``phi`` (G, n), ``a_vals`` (G, m, n),
    ``b_vals`` (G, m).  Masked points hold NaN in ``phi`` and a reason code in
    ``reasons``.
    """

    grid: np.ndarray
    phi: np.ndarray
    valid: np.ndarray
    a_vals: np.ndarray
    b_vals: np.ndarray
    reasons: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def is_scalar(self) -> bool:
        return self.grid.ndim == 1


@dataclass
class SprimeCurve:
    x_grid: np.ndarray
    sprime: np.ndarray
    lam: float
    residual_norm: float
    solution_norm: float
    extra: dict = field(default_factory=dict)


def _require_valid(valid: np.ndarray, minimum: int = MIN_VALID):
    if int(valid.sum()) < minimum:
        raise InsufficientDataError(f"only {int(valid.sum())} valid grid points (need {minimum}); curve unusable")


def solve_phi_scalar(grid, a, b, denom_tol: float = DENOM_TOL, fit_valid=None) -> PhiCurve:
    """phi = b / a where |a| exceeds ``denom_tol`` times the largest |a|."""
    grid = np.asarray(grid, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    fit_ok = np.ones(len(grid), dtype=bool) if fit_valid is None else np.asarray(fit_valid, dtype=bool)
    fit_ok = fit_ok & np.isfinite(a) & np.isfinite(b)
    reasons = np.where(fit_ok, OK, BOUNDARY).astype(object)
    scale = np.max(np.abs(a[fit_ok])) if np.any(fit_ok) else 0.0
    strong = fit_ok & (np.abs(np.where(fit_ok, a, 0.0)) > denom_tol * scale) & (scale > 0)
    reasons[fit_ok & ~strong] = WEAK
    phi = np.full(len(grid), np.nan)
    phi[strong] = b[strong] / a[strong]
    return PhiCurve(grid, phi, strong, a, b, reasons, {"denom_tol": denom_tol})


def solve_phi_vector(grid, a, b, rank_tol: float = RANK_TOL, fit_valid=None) -> PhiCurve:
    """Pointwise least squares of a(z) phi = b(z).

    ``a`` is (G, m, n) and ``b`` (G, m).  A point is rank-deficient when the
    n-th singular value of a(z) is at most ``rank_tol`` times the largest
    singular value found anywhere on the grid.
    """
    grid = np.asarray(grid, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    G, m, n = a.shape
    if m < n:
        raise ValueError(f"need at least as many instruments as regressors (m={m} < n={n})")
    fit_ok = np.ones(G, dtype=bool) if fit_valid is None else np.asarray(fit_valid, dtype=bool)
    fit_ok = fit_ok & np.all(np.isfinite(a), axis=(1, 2)) & np.all(np.isfinite(b), axis=1)
    reasons = np.where(fit_ok, OK, BOUNDARY).astype(object)
    sv = np.zeros((G, n))
    if np.any(fit_ok):
        sv[fit_ok] = np.linalg.svd(a[fit_ok], compute_uv=False)
    top = sv[:, 0].max() if np.any(fit_ok) else 0.0
    strong = fit_ok & (sv[:, n - 1] > rank_tol * top) & (top > 0)
    reasons[fit_ok & ~strong] = RANK
    phi = np.full((G, n), np.nan)
    for gi in np.flatnonzero(strong):
        phi[gi] = np.linalg.lstsq(a[gi], b[gi], rcond=None)[0]
    return PhiCurve(grid, phi, strong, a, b, reasons, {"rank_tol": rank_tol})


def _scalar_curves(z, x, y, degree, bandwidth_x, bandwidth_y, grid, weights):
    if bandwidth_x is None and bandwidth_y is None:
        bandwidth_x, bandwidth_y = select_bandwidth_cv(z, np.column_stack([x, y]), degree, per_column=True,
                                                       rule=CV_RULE)
    if bandwidth_x is None:
        bandwidth_x = select_bandwidth_cv(z, x, degree, rule=CV_RULE)
    if bandwidth_y is None:
        bandwidth_y = select_bandwidth_cv(z, y, degree, rule=CV_RULE)
    _, ax, vx, dens = local_poly(z, x, degree, bandwidth_x, grid, weights)
    _, by, vy, _ = local_poly(z, y, degree, bandwidth_y, grid, weights)
    return ax[:, 0], by[:, 0], vx & vy, float(bandwidth_x), float(bandwidth_y), dens


def _check_regime(d: ContinuousDataset, scalar: bool):
    if not isinstance(d, ContinuousDataset):
        raise RegimeMismatchError(f"expected a continuous dataset, got {type(d).__name__}")
    if scalar and (d.n != 1 or d.m != 1):
        raise RegimeMismatchError(f"scalar estimator needs n = m = 1 (got n={d.n}, m={d.m})")


def estimate_phi_scalar(d: ContinuousDataset, bandwidth_x: float | None = None, bandwidth_y: float | None = None,
                        grid=None, degree: int = 2, denom_tol: float = DENOM_TOL, weights=None) -> PhiCurve:
    """phi(z) from local polynomial derivatives of E(X | Z) and E(Y | Z)."""
    _check_regime(d, scalar=True)
    z, x = d.z[:, 0], d.x[:, 0]
    grid = default_grid(z) if grid is None else np.asarray(grid, dtype=float)
    a, b, fv, hx, hy, dens = _scalar_curves(z, x, d.y, degree, bandwidth_x, bandwidth_y, grid, weights)
    curve = solve_phi_scalar(grid, a, b, denom_tol, fv)
    curve.extra.update(bandwidth_x=hx, bandwidth_y=hy, density=dens)
    _require_valid(curve.valid)
    return curve


def estimate_phi_vector(d: ContinuousDataset, bandwidths=None, grid=None, rank_tol: float = RANK_TOL,
                        degree: int = 2, weights=None) -> PhiCurve:
    """phi(z) in R^n from the m x n derivative matrix a(z) and m-vector b(z).

    With one instrument the univariate smoother is used, so the result agrees
    with :func:`estimate_phi_scalar` when n = 1.  With m >= 2 a product-kernel
    local linear fit gives all partial derivatives at once; the default grid
    is a 21-point tensor grid (m <= 2 only) and the default bandwidths come
    from :func:`select_bandwidths_nd`.
    """
    _check_regime(d, scalar=False)
    n, m = d.n, d.m
    if m < n:
        raise ValueError(f"need at least as many instruments as regressors (m={m} < n={n})")
    if m == 1:
        z = d.z[:, 0]
        grid = default_grid(z) if grid is None else np.asarray(grid, dtype=float).reshape(-1)
        R = np.column_stack([d.x, d.y])
        if bandwidths is None:
            h = select_bandwidth_cv(z, R, degree, per_column=True, rule=CV_RULE)
            hx, hy = list(h[:n]), float(h[n])
        else:
            h = np.broadcast_to(np.asarray(bandwidths, dtype=float).reshape(-1), (n + 1,))
            hx, hy = list(h[:n]), float(h[n])
        ok = np.ones(len(grid), dtype=bool)
        a = np.empty((len(grid), 1, n))
        for j in range(n):
            _, dj, vj, _ = local_poly(z, R[:, j], degree, hx[j], grid, weights)
            a[:, 0, j] = dj[:, 0]
            ok &= vj
        _, db, vb, _ = local_poly(z, d.y, degree, hy, grid, weights)
        ok &= vb
        curve = solve_phi_vector(grid[:, None], a, db, rank_tol, ok)
        curve.extra["bandwidths"] = [float(v) for v in hx] + [float(hy)]
    else:
        if grid is None:
            if m > 2:
                raise ValueError("with more than two instruments a grid must be supplied")
            grid = tensor_grid(d.z)
        grid = np.atleast_2d(np.asarray(grid, dtype=float))
        if bandwidths is None:
            bandwidths = select_bandwidths_nd(d.z, np.column_stack([d.x, d.y]), rule=CV_RULE)
        R = np.column_stack([d.x, d.y])
        _, grads, ok = local_linear_nd(d.z, R, bandwidths, grid, weights)
        curve = solve_phi_vector(grid, grads[:, :, :n], grads[:, :, n], rank_tol, ok)
        curve.extra["bandwidths"] = [float(v) for v in np.broadcast_to(bandwidths, (m,))]
    _require_valid(curve.valid)
    return curve


def _tikhonov(Q, phi, D, lam):
    M = np.vstack([Q, np.sqrt(lam) * D])
    rhs = np.concatenate([phi, np.zeros(D.shape[0])])
    s = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return s, float(np.linalg.norm(Q @ s - phi)), float(np.linalg.norm(D @ s))


def _lcurve_corner(res: np.ndarray, sol: np.ndarray) -> int:
    """Index of maximum curvature of the (log residual, log roughness) curve."""
    lr = np.log(np.maximum(res, 1e-300))
    ls = np.log(np.maximum(sol, 1e-300))
    t = np.arange(len(lr), dtype=float)
    d1r, d1s = np.gradient(lr, t), np.gradient(ls, t)
    d2r, d2s = np.gradient(d1r, t), np.gradient(d1s, t)
    kappa = (d1r * d2s - d2r * d1s) / np.maximum((d1r**2 + d1s**2) ** 1.5, 1e-300)
    inner = np.arange(1, len(lr) - 1)
    return int(inner[np.argmax(kappa[inner])])


def recover_sprime(phi: PhiCurve, kernel: CondDensityKernel, lam: float | None = None,
                   sweep: int = LCURVE_POINTS) -> SprimeCurve:
    """Regularised solve of sum_i K(x_i | z) w_i s'(x_i) = phi(z).

    Minimises ||Q s - phi||^2 + lam ||D s||^2 over the valid z points, with
    Q[z, i] = K(x_i | z) w_i (trapezoid weights) and D first differences.
    ``lam=None`` picks the L-curve corner over a logarithmic sweep scaled by
    the largest squared singular value of Q.
    """
    if not phi.is_scalar:
        raise ValueError("integral-equation recovery needs a scalar phi curve")
    if len(kernel.z_grid) != len(phi.grid) or not np.allclose(kernel.z_grid, phi.grid):
        raise ValueError("kernel z_grid must coincide with the phi grid")
    if lam is not None and not lam > 0:
        raise ValueError("lambda must be positive")
    use = phi.valid & kernel.valid
    _require_valid(use)
    Q = (kernel.K * kernel.widths[:, None]).T[use]
    rhs = phi.phi[use]
    k = len(kernel.x_grid)
    D = np.diff(np.eye(k), axis=0)
    sweep_out = None
    if lam is None:
        top = np.linalg.norm(Q, 2) ** 2
        lams = top * np.logspace(-8, 0, sweep)
        fits = [_tikhonov(Q, rhs, D, L) for L in lams]
        res = np.array([f[1] for f in fits])
        sol = np.array([f[2] for f in fits])
        lam = float(lams[_lcurve_corner(res, sol)])
        sweep_out = {"lambdas": lams, "residual_norms": res, "solution_norms": sol}
    s, r, n = _tikhonov(Q, rhs, D, lam)
    extra = {"n_equations": int(use.sum())}
    if sweep_out:
        extra["lcurve"] = sweep_out
    return SprimeCurve(np.asarray(kernel.x_grid), s, float(lam), r, n, extra)


def estimate_sprime(d: ContinuousDataset, phi: PhiCurve | None = None, x_grid=None, lam: float | None = None,
                    bandwidths=None, **phi_options) -> SprimeCurve:
    """phi estimation, conditional density of X given Z on the phi grid, and
    the regularised recovery of s'."""
    phi = estimate_phi_scalar(d, **phi_options) if phi is None else phi
    x = d.x[:, 0]
    x_grid = default_grid(x) if x_grid is None else np.asarray(x_grid, dtype=float)
    kern = fit_cond_density(x, d.z[:, 0], x_grid=x_grid, z_grid=phi.grid, bandwidths=bandwidths)
    out = recover_sprime(phi, kern, lam)
    out.extra["phi"] = phi
    return out


def _interp_phi(phi: PhiCurve, z: np.ndarray):
    """phi at sample points whose nearest grid point is valid, by linear
    interpolation between valid grid points.  Returns (values, kept mask)."""
    g = phi.grid
    z = np.asarray(z, dtype=float).reshape(-1)
    nearest = np.clip(np.searchsorted(g, z), 1, len(g) - 1)
    nearest = np.where(np.abs(z - g[nearest - 1]) <= np.abs(g[nearest] - z), nearest - 1, nearest)
    keep = phi.valid[nearest]
    vals = np.asarray(phi.phi).reshape(len(g), -1)
    gv = g[phi.valid]
    out = np.column_stack([np.interp(z[keep], gv, vals[phi.valid, j]) for j in range(vals.shape[1])])
    return out, keep


def _interp_matrix(grid: np.ndarray, z: np.ndarray) -> sparse.csr_matrix:
    """(G, N) matrix whose column i holds the linear-interpolation weights of
    sample z_i on ``grid`` (clamped at the ends, as ``np.interp``)."""
    zc = np.clip(z, grid[0], grid[-1])
    j = np.clip(np.searchsorted(grid, zc, side="right") - 1, 0, len(grid) - 2)
    t = (zc - grid[j]) / (grid[j + 1] - grid[j])
    cols = np.arange(len(z))
    return sparse.csr_matrix((np.concatenate([1 - t, t]), (np.concatenate([j, j + 1]), np.concatenate([cols, cols]))),
                             shape=(len(grid), len(z)))


def theta_constant(phi: PhiCurve, z_samples) -> dict:
    """theta = average of phi(Z_i) over the sample, for constant-effect
    models.  Samples whose nearest grid point is masked are dropped; more
    than half dropped is an error."""
    if not phi.is_scalar:
        raise ValueError("averaging is implemented for a scalar instrument")
    _require_valid(phi.valid)
    vals, keep = _interp_phi(phi, z_samples)
    dropped = 1.0 - keep.mean() if len(keep) else 1.0
    if dropped > MAX_DROP:
        raise InsufficientDataError(f"{dropped:.0%} of samples fall near masked grid points; curve coverage too poor")
    theta = vals.mean(axis=0)
    sd = vals.std(axis=0, ddof=1) if len(vals) > 1 else np.zeros_like(theta)
    return {"theta": theta, "dropped_fraction": float(dropped), "n_used": int(keep.sum()), "phi_sd": sd}


@dataclass
class ConstantEffect:
    theta: np.ndarray
    dropped_fraction: float
    phi: PhiCurve
    boot_ci: np.ndarray | None = None
    boot_se: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"theta": self.theta.tolist(), "dropped_fraction": self.dropped_fraction}
        if self.boot_ci is not None:
            out["boot_ci"] = self.boot_ci.tolist()
            out["boot_se"] = self.boot_se.tolist()
        out.update({k: v for k, v in self.extra.items() if isinstance(v, (int, float, str))})
        return out


def estimate_theta_constant(d: ContinuousDataset, bootstrap: int | None = None, seed=None, bandwidth_x=None,
                            bandwidth_y=None, grid=None, degree: int = 2, denom_tol: float = DENOM_TOL) -> ConstantEffect:
    """Constant-effect theta = E(phi(Z)) with optional bootstrap.

    Replicates keep the bandwidths chosen on the full sample, use resampling
    multiplicities as fit weights and average phi over the resampled Z.
    """
    phi = estimate_phi_scalar(d, bandwidth_x, bandwidth_y, grid, degree, denom_tol)
    res = theta_constant(phi, d.z[:, 0])
    out = ConstantEffect(res["theta"], res["dropped_fraction"], phi,
                         extra={"bandwidth_x": phi.extra["bandwidth_x"], "bandwidth_y": phi.extra["bandwidth_y"]})
    if bootstrap:
        z, x = d.z[:, 0], d.x[:, 0]
        hx, hy = phi.extra["bandwidth_x"], phi.extra["bandwidth_y"]
        engine = prepare_local_poly(z, np.column_stack([x, d.y]), degree, min(hx, hy))
        interp = _interp_matrix(phi.grid, z)
        draws = []
        failed = 0
        B = int(bootstrap)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IVWarning)
            for lo in range(0, B, BOOT_CHUNK):
                W = np.array([bootstrap_counts(len(d), seed, rep) for rep in range(lo, min(B, lo + BOOT_CHUNK))])
                (_, ax, vx), (_, by, vy) = engine.fit_many(phi.grid, [hx, hy], W)
                node_w = (interp @ W.T).T
                for k, w in enumerate(W):
                    try:
                        pc = solve_phi_scalar(phi.grid, ax[k, :, 0], by[k, :, 1], denom_tol, vx[k] & vy[k])
                        _require_valid(pc.valid)
                        if pc.valid.all():
                            draws.append(node_w[k] @ pc.phi / w.sum())
                            continue
                        vals, keep = _interp_phi(pc, z)
                        wk = w[keep]
                        if wk.sum() < MAX_DROP * len(z):
                            raise InsufficientDataError("too many samples near masked grid points")
                        draws.append(wk @ vals[:, 0] / wk.sum())
                    except InsufficientDataError:
                        failed += 1
        if len(draws) >= 2:
            out.boot_ci, out.boot_se = percentile_summary(np.array(draws)[:, None])
        out.extra["boot_failed"] = failed
    return out


@dataclass
class LinearRatio:
    beta_hat: float
    slope_yz: float
    slope_xz: float
    se: float
    naive_slope: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def _slope(x, y):
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def linear_iv_ratio(d: ContinuousDataset) -> LinearRatio:
    """Ratio of the OLS slopes of Y on Z and X on Z, with a
    heteroskedasticity-robust standard error and the naive Y-on-X slope."""
    _check_regime(d, scalar=True)
    z, x, y = d.z[:, 0], d.x[:, 0], d.y
    if len(z) < 3 or np.ptp(z) == 0:
        raise WeakInstrumentError("instrument has no sample variation")
    s_yz, s_xz = _slope(z, y), _slope(z, x)
    sd_y, sd_z = y.std(), z.std()
    if abs(s_xz) < 1e-12 * max(sd_y, 1e-300) / sd_z or s_xz == 0:
        raise WeakInstrumentError(f"slope of X on Z ({s_xz:.3g}) is numerically zero")
    beta = s_yz / s_xz
    zc = z - z.mean()
    resid = (y - y.mean()) - beta * (x - x.mean())
    se = float(np.sqrt(np.sum(zc**2 * resid**2)) / abs(zc @ (x - x.mean())))
    naive = _slope(x, y) if np.ptp(x) > 0 else float("nan")
    return LinearRatio(float(beta), s_yz, s_xz, se, naive)
