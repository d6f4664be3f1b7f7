"""Causal effects of a categorical treatment with a scalar continuous instrument.

With q_j(z) = P(X = j | Z = z) and mu(z) = E(Y | Z = z), the derivative curves
a_j = q_j' and b = mu' satisfy ``b(z) = sum_j theta_j a_j(z)`` for j = 1..n.
The estimator smooths X and Y on Z, differentiates, and fits that linear
relation over a grid of z values by weighted least squares.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import MixedDataset
from .discrete_iv import RANK_TOL, ThetaEstimate, bootstrap_counts, percentile_summary
from .errors import InsufficientDataError, IVWarning, UnderidentifiedError
from .npreg import default_grid, fit_local_poly, fit_multiclass_probs, select_bandwidth_cv

WEIGHTINGS = ("density", "uniform")
# derivative targets favour the smoother end of the CV-indistinguishable set
CV_RULE = "1se"


@dataclass
class FunctionalSystem:
    """Derivative curves on the unmasked grid points.

    ``a_curves`` is (G, n) and excludes the baseline class; ``a_full`` keeps
    all n+1 classes when available.  ``weights`` are nonnegative and sum to 1.
    """

    grid: np.ndarray
    a_curves: np.ndarray
    b_curve: np.ndarray
    weights: np.ndarray
    a_full: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.a_curves = np.asarray(self.a_curves, dtype=float).reshape(len(self.grid), -1)
        self.b_curve = np.asarray(self.b_curve, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.b_curve) != len(self.grid) or len(w) != len(self.grid):
            raise ValueError("grid, a_curves, b_curve and weights must have matching lengths")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        self.weights = w / w.sum() if w.sum() > 0 else w

    @property
    def n(self) -> int:
        return self.a_curves.shape[1]


@dataclass
class IndependenceReport:
    effective_rank: int
    gram_cond: float
    gram_eigenvalues: np.ndarray


def build_functional_system(d: MixedDataset, bandwidth_q: float | None = None, bandwidth_mu: float | None = None,
                            grid=None, degree: int = 2, weighting: str = "density",
                            sample_weights=None) -> FunctionalSystem:
    """Smooth X and Y on Z and collect the derivative curves.

    Bandwidths default to independent cross-validated choices for the class
    probabilities and for the conditional mean of Y.  ``weighting`` is
    ``"density"`` (proportional to the kernel estimate of the Z density at
    each grid point) or ``"uniform"``.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    z, x, y = d.z, d.x, d.y
    grid = default_grid(z) if grid is None else np.asarray(grid, dtype=float)
    pf = fit_multiclass_probs(z, x, bandwidth=bandwidth_q, grid=grid, n=d.n, degree=degree, weights=sample_weights)
    mf = fit_local_poly(z, y, degree=degree, bandwidth=bandwidth_mu, grid=grid, weights=sample_weights)
    keep = pf.valid & mf.valid
    w = mf.density[keep] if weighting == "density" else np.ones(int(keep.sum()))
    return FunctionalSystem(grid[keep], pf.dprobs[keep, 1:], mf.derivs[keep], w, a_full=pf.dprobs[keep],
                            extra=dict(bandwidth_q=pf.bandwidth, bandwidth_mu=mf.bandwidth, q=pf.probs[keep],
                                       mu=mf.values[keep], n_masked=int((~keep).sum())))


def check_linear_independence(system: FunctionalSystem, tol: float = RANK_TOL) -> IndependenceReport:
    """Effective rank of the weighted Gram matrix of the a-curves: eigenvalues
    above ``tol`` times the largest."""
    A = system.a_curves
    G = (A * system.weights[:, None]).T @ A
    ev = np.sort(np.linalg.eigvalsh(G))[::-1] if G.size else np.zeros(0)
    top = ev[0] if len(ev) else 0.0
    rank = int(np.sum(ev > tol * top)) if top > 0 else 0
    cond = float(top / ev[-1]) if rank == system.n and ev[-1] > 0 else np.inf
    return IndependenceReport(rank, cond, ev)


def fit_theta_functional(system: FunctionalSystem, tol: float = RANK_TOL) -> ThetaEstimate:
    """Weighted least squares of b on the a-curves over the grid."""
    n = system.n
    if len(system.grid) < n:
        raise InsufficientDataError(f"need at least {n} unmasked grid points, have {len(system.grid)}")
    rep = check_linear_independence(system, tol)
    if rep.effective_rank < n:
        A = system.a_curves * np.sqrt(system.weights)[:, None]
        _, s, vt = np.linalg.svd(A, full_matrices=True)
        raise UnderidentifiedError(rep.effective_rank, n, vt[rep.effective_rank:].T)
    sw = np.sqrt(system.weights)
    theta = np.linalg.lstsq(system.a_curves * sw[:, None], system.b_curve * sw, rcond=None)[0]
    resid = system.b_curve - system.a_curves @ theta
    return ThetaEstimate(theta, rep.effective_rank, rep.gram_cond, float(np.sqrt(system.weights @ resid**2)),
                         extra={"residual_curve": resid, "gram_cond": rep.gram_cond})


def estimate(d: MixedDataset, bandwidth_q: float | None = None, bandwidth_mu: float | None = None, grid=None,
             degree: int = 2, weighting: str = "density", bootstrap: int | None = None, seed=None,
             tol: float = RANK_TOL) -> ThetaEstimate:
    """Smooth, differentiate and fit, with optional row-resampling bootstrap.

    Bootstrap replicates reuse the bandwidths selected on the full sample and
    enter as resampling multiplicities (substream ``b`` of ``seed``).
    """
    if len(d) < 20:
        raise InsufficientDataError("smooth IV estimation needs at least 20 observations")
    grid = default_grid(d.z) if grid is None else np.asarray(grid, dtype=float)
    if bandwidth_q is None:
        ind = (d.x[:, None] == np.arange(d.n + 1)[None, :]).astype(float)
        bandwidth_q = select_bandwidth_cv(d.z, ind, degree, rule=CV_RULE)
    if bandwidth_mu is None:
        bandwidth_mu = select_bandwidth_cv(d.z, d.y, degree, rule=CV_RULE)
    system = build_functional_system(d, bandwidth_q, bandwidth_mu, grid, degree, weighting)
    est = fit_theta_functional(system, tol)
    est.extra.update(bandwidth_q=float(bandwidth_q), bandwidth_mu=float(bandwidth_mu),
                     n_masked=system.extra["n_masked"], system=system)
    if bootstrap:
        draws = []
        failed = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IVWarning)
            for rep in range(int(bootstrap)):
                w = bootstrap_counts(len(d), seed, rep)
                try:
                    s = build_functional_system(d, bandwidth_q, bandwidth_mu, grid, degree, weighting, w)
                    draws.append(fit_theta_functional(s, tol).theta)
                except (UnderidentifiedError, InsufficientDataError, ValueError):
                    failed += 1
        if len(draws) >= 2:
            est.boot_ci, est.boot_se = percentile_summary(np.array(draws))
        est.extra["boot_failed"] = failed
    return est


def naive_difference(d: MixedDataset) -> np.ndarray:
    """E(Y | X = j) - E(Y | X = 0), ignoring the instrument."""
    k = d.n + 1
    cnt = np.bincount(d.x, minlength=k).astype(float)
    s = np.bincount(d.x, weights=d.y, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / cnt
    return mean[1:] - mean[0]
