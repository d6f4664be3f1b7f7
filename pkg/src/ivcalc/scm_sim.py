"""Structural models for simulation and exact population oracles.

``DiscreteScm``
    X = V_Z, Y = U_X with (U_0..U_n, V_1..V_m) drawn from a finite atom list
    and Z drawn independently.  Population quantities are finite sums.
``MixedScm``
    Scalar Z on [0, 1]; X = V(Z) where the whole path z -> V(z) comes from a
    single uniform W compared against the cumulative class-probability curves,
    and Y = U_X.  Latents (W, eta_0..eta_n) are joined by a Gaussian copula.
``ContinuousScm``
    Y = f(X, U), X = g(Z, U) with user-supplied vectorised maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .dataset import ContinuousDataset, DiscreteDataset, MixedDataset
from .discrete_iv import PairSet, resolve_pairs
from .errors import ModelError
from .rng import as_generator

SIMPLEX_TOL = 1e-12


def _simplex(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ModelError(f"{name} must be a probability vector (got sum {p.sum()!r})")
    return p / p.sum()


# --------------------------------------------------------------------------
# discrete model


@dataclass(frozen=True)
class DiscreteScm:
    """Finite-support joint law of (U_0..U_n, V_1..V_m) plus the Z law.

    Atom ``k`` has probability ``weights[k]``, potential outcomes ``u[k]``
    (length n+1) and instrument responses ``v[k]`` (length m, X codes).
    """

    p_z: np.ndarray
    weights: np.ndarray
    u: np.ndarray
    v: np.ndarray
    truth: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p_z = _simplex(self.p_z, "p_z")
        w = _simplex(self.weights, "atom weights")
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        v = np.atleast_2d(np.asarray(self.v)).astype(np.int64)
        if u.shape[0] != len(w) or v.shape[0] != len(w):
            raise ModelError("weights, u and v must describe the same number of atoms")
        if v.shape[1] != len(p_z):
            raise ModelError(f"each v must have one entry per Z level ({len(p_z)})")
        n = u.shape[1] - 1
        if n < 1:
            raise ModelError("u needs at least two potential outcomes (n >= 1)")
        if v.min() < 0 or v.max() > n:
            raise ModelError(f"v entries must be X codes in 0..{n}")
        if len(p_z) < 2:
            raise ModelError("need at least two instrument levels")
        object.__setattr__(self, "p_z", p_z)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_atoms(cls, p_z, atoms: Sequence, truth: dict | None = None) -> "DiscreteScm":
        w, u, v = zip(*atoms)
        return cls(p_z, np.array(w, dtype=float), np.array(u, dtype=float), np.array(v), truth or {})

    @property
    def atoms(self) -> list:
        return [(float(w), tuple(u), tuple(int(c) for c in v)) for w, u, v in zip(self.weights, self.u, self.v)]

    @property
    def n(self) -> int:
        return self.u.shape[1] - 1

    @property
    def m(self) -> int:
        return len(self.p_z)

    def theta(self) -> np.ndarray:
        return self.weights @ (self.u[:, 1:] - self.u[:, :1])


def simulate_discrete(model: DiscreteScm, N: int, seed=None) -> DiscreteDataset:
    rng = as_generator(seed)
    N = int(N)
    if N < 0:
        raise ValueError("N must be nonnegative")
    z = rng.choice(model.m, size=N, p=model.p_z)
    k = rng.choice(len(model.weights), size=N, p=model.weights)
    x = model.v[k, z]
    y = model.u[k, x]
    return DiscreteDataset(y, x, z, model.n, model.m)


@dataclass
class OracleReport:
    theta_true: np.ndarray
    A_pop: np.ndarray
    b_pop: np.ndarray
    identity_residual: float
    cond_i_corr: float
    cond_i_cov: np.ndarray
    pairs: tuple


def _wcorr(w, a, b) -> tuple[float, float]:
    ma, mb = w @ a, w @ b
    cov = w @ ((a - ma) * (b - mb))
    va, vb = w @ (a - ma) ** 2, w @ (b - mb) ** 2
    if va <= 1e-300 or vb <= 1e-300:
        return 0.0, float(cov)
    return float(cov / np.sqrt(va * vb)), float(cov)


def exact_population_oracle(model: DiscreteScm, pairs: PairSet | str | None = None) -> OracleReport:
    """Population A, b and theta by enumeration over atoms.

    ``cond_i_corr`` is the largest |corr(U_j - U_0, I(V_k = j) - I(V_i = j))|
    over pairs and non-baseline levels; ``cond_i_cov`` holds the matching
    covariances, whose row sums are exactly the gap b_s - sum_j a_sj theta_j.
    """
    ps = resolve_pairs(pairs, model.m)
    w, u, v, n = model.weights, model.u, model.v, model.n
    theta = model.theta()
    mu = np.array([w @ u[np.arange(len(w)), v[:, i]] for i in range(model.m)])
    prob = np.array([[w @ (v[:, i] == j) for j in range(n + 1)] for i in range(model.m)])
    A = np.array([prob[k, 1:] - prob[i, 1:] for i, k in ps]).reshape(len(ps), n)
    b = np.array([mu[k] - mu[i] for i, k in ps])
    corr = 0.0
    covs = np.zeros((len(ps), n))
    for r, (i, k) in enumerate(ps):
        for j in range(1, n + 1):
            c, cv = _wcorr(w, u[:, j] - u[:, 0], (v[:, k] == j).astype(float) - (v[:, i] == j))
            corr = max(corr, abs(c))
            covs[r, j - 1] = cv
    resid = float(np.max(np.abs(b - A @ theta))) if len(b) else 0.0
    return OracleReport(theta, A, b, resid, corr, covs, ps.pairs)


COMPLIANCE_TYPES = {"never": (0, 0), "complier": (0, 1), "always": (1, 1), "defier": (1, 0)}


def example3_scm(compliance_spec: dict, outcome_law: dict | None = None, p_z=(0.5, 0.5)) -> DiscreteScm:
    """Binary assignment Z, binary received treatment X, Y = X U_1 + (1-X) U_0.

    ``compliance_spec`` maps compliance type (never/complier/always/defier)
    to its probability; the type fixes (V_0, V_1).  ``outcome_law`` maps a
    type to a list of ``(weight, u0, u1)`` atoms for the potential outcomes
    of subjects of that type (default: u0 = 0, u1 = 1).
    """
    atoms = []
    for kind, p in compliance_spec.items():
        if kind not in COMPLIANCE_TYPES:
            raise ModelError(f"unknown compliance type {kind!r}; expected one of {sorted(COMPLIANCE_TYPES)}")
        if p <= 0:
            continue
        law = (outcome_law or {}).get(kind, [(1.0, 0.0, 1.0)])
        tot = sum(a[0] for a in law)
        for wt, u0, u1 in law:
            atoms.append((p * wt / tot, (u0, u1), COMPLIANCE_TYPES[kind]))
    model = DiscreteScm.from_atoms(p_z, atoms)
    model.truth["theta_true"] = model.theta().tolist()
    return model


def example3_engineered(theta: float = 1.5, cond_i_corr: float = 0.0, compliance=(0.2, 0.6, 0.2),
                        sigma: float = 1.0, baseline=(0.0, 1.0, 2.0), baseline_noise: float = 0.5,
                        p_z=(0.5, 0.5)) -> DiscreteScm:
    """Noncompliance model with a prescribed correlation between the
    individual effect U_1 - U_0 and the compliance response.

    Types are never-taker / complier / always-taker with the given
    probabilities.  Baseline outcomes differ by type, so X is confounded.
    The individual effect is ``d_type +/- sigma``; the complier shift is set so
    that corr(U_1 - U_0, I(V_1=1) - I(V_0=1)) equals ``cond_i_corr`` while
    E(U_1 - U_0) stays at ``theta``.
    """
    if not -1.0 < cond_i_corr < 1.0:
        raise ModelError("cond_i_corr must lie in (-1, 1)")
    pn, pc, pa = compliance
    rho = cond_i_corr
    shift = rho * sigma / np.sqrt(pc * (1 - pc) * (1 - rho**2)) if rho else 0.0
    d_other = theta - pc * shift
    d = {"never": d_other, "complier": d_other + shift, "always": d_other}
    law = {}
    for kind, base in zip(("never", "complier", "always"), baseline):
        law[kind] = [(0.25, base + e0, base + e0 + d[kind] + s)
                     for e0 in (-baseline_noise, baseline_noise) for s in (-sigma, sigma)]
    spec = {"never": pn, "complier": pc, "always": pa}
    model = example3_scm(spec, law, p_z)
    model.truth.update(theta_true=[theta], cond_i_corr=rho)
    return model


def random_discrete_scm(rng, n: int, m: int, n_v_atoms: int = 6, n_d_atoms: int = 4,
                        confounded: bool = True) -> DiscreteScm:
    """Random finite model in which the effect vector (U_j - U_0)_j is
    independent of the instrument responses, so the identifying correlation
    condition holds exactly.

    Baseline outcomes U_0 may depend on the instrument-response atom
    (``confounded``), which makes naive comparisons biased.
    """
    rng = as_generator(rng)
    pv = rng.dirichlet(np.ones(n_v_atoms))
    vs = rng.integers(0, n + 1, size=(n_v_atoms, m))
    base = rng.normal(size=n_v_atoms) * (2.0 if confounded else 0.0)
    pd = rng.dirichlet(np.ones(n_d_atoms))
    ds = rng.normal(size=(n_d_atoms, n))
    atoms = []
    for a in range(n_v_atoms):
        for c in range(n_d_atoms):
            atoms.append((pv[a] * pd[c], np.concatenate([[base[a]], base[a] + ds[c]]), vs[a]))
    return DiscreteScm.from_atoms(rng.dirichlet(np.ones(m) * 2), atoms)


# --------------------------------------------------------------------------
# mixed model


@dataclass(frozen=True)
class ZLaw:
    """Law of a scalar instrument on [0, 1]: uniform or truncated normal."""

    kind: str = "uniform"
    mean: float = 0.5
    sd: float = 0.25

    def __post_init__(self):
        if self.kind not in ("uniform", "truncnorm"):
            raise ModelError(f"unknown Z law {self.kind!r}")
        if self.kind == "truncnorm" and self.sd <= 0:
            raise ModelError("truncated normal needs sd > 0")

    def _dist(self):
        if self.kind == "uniform":
            return stats.uniform(0.0, 1.0)
        a, b = (0.0 - self.mean) / self.sd, (1.0 - self.mean) / self.sd
        return stats.truncnorm(a, b, loc=self.mean, scale=self.sd)

    def sample(self, rng, N: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(0.0, 1.0, N)
        return self._dist().ppf(rng.uniform(0.0, 1.0, N))

    def pdf(self, z) -> np.ndarray:
        return self._dist().pdf(z)


def copula_from_rank_corr(rho_s: float) -> float:
    """Gaussian-copula parameter giving Spearman rank correlation ``rho_s``."""
    return float(2.0 * np.sin(np.pi * rho_s / 6.0))


@dataclass(frozen=True)
class MixedScm:
    """Discrete X driven by scalar Z through class-probability curves.

    ``q(z)`` returns a (len(z), n+1) array of P(X = j | Z = z) and ``dq`` its
    derivative.  Potential outcomes are ``U_j = u_mean[j] + u_sd[j] * G_j``
    where (G_W, G_0..G_n) is standard Gaussian with correlation
    ``latent_corr`` (index 0 is the latent behind W = Phi(G_W)).
    """

    p_z: ZLaw
    q: Callable
    dq: Callable
    u_mean: np.ndarray
    u_sd: np.ndarray
    latent_corr: np.ndarray
    truth: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        u_mean = np.asarray(self.u_mean, dtype=float)
        u_sd = np.asarray(self.u_sd, dtype=float)
        R = np.asarray(self.latent_corr, dtype=float)
        k = len(u_mean)
        if k < 2 or len(u_sd) != k:
            raise ModelError("u_mean and u_sd must have n+1 >= 2 entries")
        if R.shape != (k + 1, k + 1) or not np.allclose(R, R.T) or not np.allclose(np.diag(R), 1.0):
            raise ModelError("latent_corr must be a symmetric correlation matrix over (W, eta_0..eta_n)")
        if np.linalg.eigvalsh(R).min() < -1e-10:
            raise ModelError("latent_corr is not positive semidefinite")
        probe = np.linspace(0.0, 1.0, 201)
        qs = np.asarray(self.q(probe))
        if qs.shape != (len(probe), k):
            raise ModelError(f"q(z) must return shape (len(z), {k})")
        if np.any(qs < -SIMPLEX_TOL) or np.max(np.abs(qs.sum(axis=1) - 1.0)) > 1e-9:
            bad = probe[np.argmax(np.abs(qs.sum(axis=1) - 1.0) + (qs.min(axis=1) < 0))]
            raise ModelError(f"q(z) is not a probability vector at z={bad:.3f}")
        dqs = np.asarray(self.dq(probe))
        if np.max(np.abs(dqs.sum(axis=1))) > 1e-9:
            raise ModelError("dq(z) rows must sum to zero")
        object.__setattr__(self, "u_mean", u_mean)
        object.__setattr__(self, "u_sd", u_sd)
        object.__setattr__(self, "latent_corr", R)

    @property
    def n(self) -> int:
        return len(self.u_mean) - 1

    def theta(self) -> np.ndarray:
        return self.u_mean[1:] - self.u_mean[0]

    def _loadings(self) -> np.ndarray:
        # cov(eta_j, G_W)
        return self.u_sd * self.latent_corr[0, 1:]

    def cond_i_holds(self, tol: float = 1e-12) -> bool:
        """Whether every U_j - U_0 is uncorrelated with W (hence, being jointly
        Gaussian with G_W, independent of the whole path V(.))."""
        c = self._loadings()
        return bool(np.max(np.abs(c - c[0])) <= tol)

    def mu(self, z) -> np.ndarray:
        """E(Y | Z = z) in closed form."""
        z = np.asarray(z, dtype=float)
        q = np.asarray(self.q(z))
        C = np.cumsum(q, axis=1)
        t = stats.norm.ppf(np.clip(C, 0.0, 1.0))
        phi_t = stats.norm.pdf(t)
        phi_prev = np.concatenate([np.zeros((len(z), 1)), phi_t[:, :-1]], axis=1)
        return q @ self.u_mean + (phi_prev - phi_t) @ self._loadings()

    def a_curves(self, z) -> np.ndarray:
        return np.asarray(self.dq(np.asarray(z, dtype=float)))[:, 1:]

    def b_curve(self, z) -> np.ndarray:
        """d/dz E(Y | Z = z) in closed form.

        With C_j the cumulative curves and t_j = Phi^{-1}(C_j),
        b = sum_j u_mean_j q_j' + sum_{j<n} (c_j - c_{j+1}) t_j C_j'
        where c_j = cov(eta_j, G_W).
        """
        z = np.asarray(z, dtype=float)
        dq = np.asarray(self.dq(z))
        out = dq @ self.u_mean
        c = self._loadings()
        gap = c[:-1] - c[1:]
        if np.any(gap != 0):
            C = np.cumsum(np.asarray(self.q(z)), axis=1)[:, :-1]
            dC = np.cumsum(dq, axis=1)[:, :-1]
            with np.errstate(invalid="ignore"):
                t = stats.norm.ppf(np.clip(C, 0.0, 1.0))
                term = np.where(dC == 0, 0.0, t * dC)
            out = out + term @ gap
        return out


def simulate_mixed(model: MixedScm, N: int, seed=None) -> MixedDataset:
    rng = as_generator(seed)
    N = int(N)
    z = model.p_z.sample(rng, N)
    k = model.n + 1
    G = rng.multivariate_normal(np.zeros(k + 1), model.latent_corr, size=N, method="eigh")
    W = stats.norm.cdf(G[:, 0])
    eta = G[:, 1:] * model.u_sd
    C = np.cumsum(np.asarray(model.q(z)), axis=1)
    x = np.sum(W[:, None] >= C[:, :-1], axis=1)
    y = model.u_mean[x] + eta[np.arange(N), x]
    return MixedDataset(y, x, z, model.n)


def mixed_cond_i_diagnostic(model: MixedScm, probes, n_mc: int = 100_000, seed=None) -> float:
    """Largest |corr(U_j - U_0, I(V(z+d) = j) - I(V(z) = j))| over probe (z, d)
    pairs, by Monte Carlo over the latents.  Only meaningful for synthetic
    models, where the latents are available."""
    rng = as_generator(seed)
    k = model.n + 1
    G = rng.multivariate_normal(np.zeros(k + 1), model.latent_corr, size=n_mc, method="eigh")
    W = stats.norm.cdf(G[:, 0])
    eta = G[:, 1:] * model.u_sd
    worst = 0.0
    for z, dz in probes:
        c0 = np.cumsum(np.asarray(model.q(np.array([z])))[0])
        c1 = np.cumsum(np.asarray(model.q(np.array([z + dz])))[0])
        x0 = np.sum(W[:, None] >= c0[None, :-1], axis=1)
        x1 = np.sum(W[:, None] >= c1[None, :-1], axis=1)
        for j in range(1, k):
            d = (x1 == j).astype(float) - (x0 == j)
            if d.std() == 0:
                continue
            diff = eta[:, j] - eta[:, 0]
            if diff.std() == 0:
                continue
            worst = max(worst, abs(np.corrcoef(diff, d)[0, 1]))
    return worst


def _eps_dist(eps_law):
    if isinstance(eps_law, dict):
        kind = eps_law.get("kind", "uniform")
        if kind == "uniform":
            lo, hi = eps_law.get("low", -1.0), eps_law.get("high", 1.0)
            return stats.uniform(lo, hi - lo)
        if kind == "normal":
            return stats.norm(eps_law.get("mean", 0.0), eps_law.get("sd", 1.0))
        if kind == "logistic":
            return stats.logistic(eps_law.get("loc", 0.0), eps_law.get("scale", 1.0))
        raise ModelError(f"unknown error law {kind!r}")
    return eps_law


def example2_scm(beta0: float = 1.0, beta1: float = 2.0, alpha0: float = 0.0, alpha1: float = 1.0,
                 eps_law=None, corr: float = 0.5, eta_sd: float = 1.0, z_law: ZLaw | None = None) -> MixedScm:
    """Program participation: Y = b0 + b1 X + eta, X = I(a0 + a1 Z + eps > 0).

    ``corr`` is the rank correlation between eps and eta (Gaussian copula).
    The class curve is q_1(z) = P(eps > -a0 - a1 z).
    """
    if not -1.0 < corr < 1.0:
        raise ModelError("corr must lie in (-1, 1)")
    eps = _eps_dist(eps_law if eps_law is not None else {"kind": "uniform", "low": -1.0, "high": 1.0})

    def q(z):
        z = np.asarray(z, dtype=float)
        q1 = eps.sf(-alpha0 - alpha1 * z)
        return np.column_stack([1.0 - q1, q1])

    def dq(z):
        z = np.asarray(z, dtype=float)
        d1 = alpha1 * eps.pdf(-alpha0 - alpha1 * z)
        return np.column_stack([-d1, d1])

    r = copula_from_rank_corr(corr)
    # eta is shared by both potential outcomes
    R = np.array([[1.0, r, r], [r, 1.0, 1.0], [r, 1.0, 1.0]])
    model = MixedScm(z_law or ZLaw(), q, dq, np.array([beta0, beta0 + beta1]), np.array([eta_sd, eta_sd]), R)
    model.truth.update(theta_true=[beta1], scenario="example2")
    return model


def multiclass_scm(theta=(1.0, -0.5), kappa: float = 4.0, cuts=(-0.3, 1.8), eta_sd: float = 0.5,
                   violate: float = 0.0, z_law: ZLaw | None = None) -> MixedScm:
    """Three-level X from an ordered-logistic latent index in Z.

    C_0(z) = sigmoid(cuts[0] - kappa z) and C_1(z) = sigmoid(cuts[1] - kappa z)
    are the cumulative class curves.  The outcome noise of all levels shares
    one loading on W, so the identifying condition holds, unless ``violate``
    is nonzero, in which case level 1 receives an extra loading of that size.
    """
    lo, hi = cuts
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))

    def q(z):
        z = np.asarray(z, dtype=float)
        c0, c1 = sig(lo - kappa * z), sig(hi - kappa * z)
        return np.column_stack([c0, c1 - c0, 1.0 - c1])

    def dq(z):
        z = np.asarray(z, dtype=float)
        s0, s1 = sig(lo - kappa * z), sig(hi - kappa * z)
        d0, d1 = -kappa * s0 * (1 - s0), -kappa * s1 * (1 - s1)
        return np.column_stack([d0, d1 - d0, -d1])

    rho = 0.5
    loads = np.array([rho, rho + violate, rho])
    if np.any(np.abs(loads) >= 1):
        raise ModelError("violate too large")
    R = np.empty((4, 4))
    R[0, 0] = 1.0
    R[0, 1:] = R[1:, 0] = loads
    block = np.outer(loads, loads)
    np.fill_diagonal(block, 1.0)
    # residual parts independent across levels
    R[1:, 1:] = block
    u_mean = np.concatenate([[0.0], np.asarray(theta, dtype=float)])
    model = MixedScm(z_law or ZLaw(), q, dq, u_mean, np.full(3, eta_sd), R)
    model.truth.update(theta_true=list(map(float, theta)), scenario="multiclass")
    return model


# --------------------------------------------------------------------------
# continuous model


@dataclass(frozen=True)
class ContinuousScm:
    """Y = f(X, U), X = g(Z, U) with vectorised structural maps.

    Shapes: ``f_map(x (N,n), u (N,k)) -> (N,)``, ``g_map(z (N,m), u) -> (N,n)``,
    ``u_law(rng, N) -> (N,k)``, ``p_z(rng, N) -> (N,m)``.  Optional
    ``analytic_derivatives = (h_map, k_map)`` give the partial derivatives
    ``h(x,u) = df/dx -> (N,n)`` and ``k(z,u) = dg/dz -> (N,m,n)`` with
    ``k[:, i, j] = d g_j / d z_i``.
    """

    f_map: Callable
    g_map: Callable
    u_law: Callable
    p_z: Callable
    x_bounds: tuple
    z_bounds: tuple
    analytic_derivatives: tuple | None = None
    truth: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.x_bounds)

    @property
    def m(self) -> int:
        return len(self.z_bounds)


def simulate_continuous(model: ContinuousScm, N: int, seed=None) -> ContinuousDataset:
    rng = as_generator(seed)
    N = int(N)
    z = np.asarray(model.p_z(rng, N), dtype=float).reshape(N, model.m)
    u = np.asarray(model.u_law(rng, N), dtype=float).reshape(N, -1)
    x = np.asarray(model.g_map(z, u), dtype=float).reshape(N, model.n)
    y = np.asarray(model.f_map(x, u), dtype=float).reshape(N)
    for j, (lo, hi) in enumerate(model.x_bounds):
        if N and (x[:, j].min() < lo or x[:, j].max() > hi):
            raise ModelError(
                f"generated x{j + 1} spans [{x[:, j].min():.4g}, {x[:, j].max():.4g}], outside the declared "
                f"bounds [{lo}, {hi}]; widen x_bounds")
    return ContinuousDataset(y, x, z, model.x_bounds, model.z_bounds)


def check_derivatives(model: ContinuousScm, n_probe: int = 20, seed=0, rtol: float = 1e-4) -> float:
    """Largest relative mismatch between the analytic partial derivatives and
    central finite differences at random probe points.  Raises if it exceeds
    ``rtol``."""
    if model.analytic_derivatives is None:
        raise ModelError("model has no analytic derivatives to check")
    h_map, k_map = model.analytic_derivatives
    rng = as_generator(seed)
    z = np.asarray(model.p_z(rng, n_probe), dtype=float).reshape(n_probe, model.m)
    u = np.asarray(model.u_law(rng, n_probe), dtype=float).reshape(n_probe, -1)
    x = np.asarray(model.g_map(z, u), dtype=float).reshape(n_probe, model.n)
    worst = 0.0

    def rel(num, ana):
        return np.abs(num - ana) / np.maximum(1.0, np.abs(ana))

    h = np.asarray(h_map(x, u)).reshape(n_probe, model.n)
    for j in range(model.n):
        step = 1e-5 * np.maximum(1.0, np.abs(x[:, j]))
        xp, xm = x.copy(), x.copy()
        xp[:, j] += step
        xm[:, j] -= step
        fd = (model.f_map(xp, u) - model.f_map(xm, u)) / (2 * step)
        worst = max(worst, float(rel(fd, h[:, j]).max()))
    k = np.asarray(k_map(z, u)).reshape(n_probe, model.m, model.n)
    for i in range(model.m):
        step = 1e-5 * np.maximum(1.0, np.abs(z[:, i]))
        zp, zm = z.copy(), z.copy()
        zp[:, i] += step
        zm[:, i] -= step
        fd = (np.asarray(model.g_map(zp, u)).reshape(n_probe, model.n)
              - np.asarray(model.g_map(zm, u)).reshape(n_probe, model.n)) / (2 * step[:, None])
        worst = max(worst, float(rel(fd, k[:, i, :]).max()))
    if worst > rtol:
        raise ModelError(f"analytic derivatives disagree with finite differences (relative error {worst:.3g})")
    return worst


def population_curves(model: ContinuousScm, z_grid, n_mc: int = 20_000, seed=0):
    """a(z) = E(dX/dz | Z=z), b(z) = E(dY/dX dX/dz | Z=z) and
    phi(z) = E(dY/dX | Z=z) by Monte Carlo with common random numbers.

    Returns arrays of shape (G, m, n), (G, m) and (G, n).  Because Z is
    independent of U, conditioning on Z = z amounts to fixing z and
    averaging over the law of U.
    """
    if model.analytic_derivatives is None:
        raise ModelError("population curves need analytic derivatives")
    h_map, k_map = model.analytic_derivatives
    z_grid = np.asarray(z_grid, dtype=float).reshape(-1, model.m)
    u = np.asarray(model.u_law(as_generator(seed), n_mc), dtype=float).reshape(n_mc, -1)
    G = len(z_grid)
    a = np.empty((G, model.m, model.n))
    b = np.empty((G, model.m))
    phi = np.empty((G, model.n))
    for gi, zv in enumerate(z_grid):
        zz = np.broadcast_to(zv, (n_mc, model.m))
        x = np.asarray(model.g_map(zz, u)).reshape(n_mc, model.n)
        k = np.asarray(k_map(zz, u)).reshape(n_mc, model.m, model.n)
        h = np.asarray(h_map(x, u)).reshape(n_mc, model.n)
        a[gi] = k.mean(axis=0)
        b[gi] = np.einsum("nij,nj->i", k, h) / n_mc
        phi[gi] = h.mean(axis=0)
    return a, b, phi


def _normal_u(sds, corr: np.ndarray):
    sds = np.asarray(sds, dtype=float)
    cov = corr * np.outer(sds, sds)

    def law(rng, N):
        return rng.multivariate_normal(np.zeros(len(sds)), cov, size=N, method="eigh")

    return law


def _uniform_z(lo, hi, m: int = 1):
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,))

    def law(rng, N):
        return rng.uniform(lo, hi, size=(N, m))

    return law, tuple(zip(lo, hi))


def _pad_bounds(lo, hi, sd, k: float = 12.0):
    return (float(lo - k * sd), float(hi + k * sd))


def example1_scm(beta: float = 2.0, alpha: float = 1.0, noise_sds=(0.5, 0.5, 0.5), corr: float = 0.0,
                 z_range=(-1.0, 1.0)) -> ContinuousScm:
    """Errors in variables.

    True regressor Xt = alpha Z + U4, observed X = Xt + U1, Y = beta Xt + U2,
    so X = alpha Z + U3 with U3 = U4 + U1 correlated with the measurement
    error.  ``noise_sds`` = (sd U1, sd U2, sd U4); ``corr`` = corr(U1, U2).
    U = (U1, U2, U4).
    """
    if not -1.0 < corr < 1.0:
        raise ModelError("corr must lie in (-1, 1)")
    s1, s2, s4 = noise_sds
    R = np.eye(3)
    R[0, 1] = R[1, 0] = corr
    u_law = _normal_u((s1, s2, s4), R)
    p_z, zb = _uniform_z(*z_range)
    zlo, zhi = z_range
    f = lambda x, u: beta * (x[:, 0] - u[:, 0]) + u[:, 1]
    g = lambda z, u: (alpha * z[:, 0] + u[:, 2] + u[:, 0])[:, None]
    h = lambda x, u: np.full((len(x), 1), beta)
    k = lambda z, u: np.full((len(z), 1, 1), alpha)
    xl, xh = sorted((alpha * zlo, alpha * zhi))
    xb = (_pad_bounds(xl, xh, np.hypot(s1, s4)),)
    var_z = (zhi - zlo) ** 2 / 12.0
    var_xt = alpha**2 * var_z + s4**2
    naive = (beta * var_xt + corr * s1 * s2) / (var_xt + s1**2)
    truth = dict(scenario="example1", theta_true=[beta], phi_true=float(beta), a_true=float(alpha),
                 b_true=float(alpha * beta), naive_slope=float(naive),
                 attenuation=float(var_xt / (var_xt + s1**2)))
    return ContinuousScm(f, g, u_law, p_z, xb, zb, (h, k), truth)


def _hermite_expect(fn, mean, sd, order: int = 60):
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()

    def out(center):
        center = np.asarray(center, dtype=float)
        return fn(center[..., None] + mean + sd * nodes) @ weights

    return out


def example4_scm(s: Callable = None, t: Callable = None, u_law=None, s_prime: Callable = None,
                 t_prime: Callable = None, noise_sds=(1.0, 0.5), corr: float = 0.5,
                 z_range=(-1.0, 1.0)) -> ContinuousScm:
    """Additive model Y = s(X) + U1, X = t(Z) + U2 with (U1, U2) jointly
    normal (sds ``noise_sds``, correlation ``corr``) unless ``u_law`` is given.

    Defaults: s(x) = x^2, t(z) = z.  With Gaussian U2 the identified curve
    phi(z) = E(s'(t(z) + U2)) is attached by Gauss-Hermite quadrature.
    """
    if s is None:
        s, s_prime = (lambda x: x**2), (lambda x: 2 * x)
    if t is None:
        t, t_prime = (lambda z: z), (lambda z: np.ones_like(z))
    if not -1.0 < corr < 1.0:
        raise ModelError("corr must lie in (-1, 1)")
    s1, s2 = noise_sds
    gaussian = u_law is None
    if gaussian:
        u_law = _normal_u((s1, s2), np.array([[1.0, corr], [corr, 1.0]]))
    p_z, zb = _uniform_z(*z_range)
    zz = np.linspace(*z_range, 401)
    tz = t(zz)
    xb = (_pad_bounds(tz.min(), tz.max(), s2),)
    f = lambda x, u: s(x[:, 0]) + u[:, 0]
    g = lambda z, u: (t(z[:, 0]) + u[:, 1])[:, None]
    deriv = None
    truth = dict(scenario="example4")
    if s_prime is not None and t_prime is not None:
        h = lambda x, u: s_prime(x[:, 0])[:, None]
        k = lambda z, u: np.asarray(t_prime(z[:, 0]), dtype=float)[:, None, None]
        deriv = (h, k)
        truth["theta_fn"] = s_prime
        if gaussian:
            eph = _hermite_expect(s_prime, 0.0, s2)
            truth["phi_fn"] = lambda z: eph(t(np.asarray(z, dtype=float)))
            truth["a_fn"] = lambda z: np.asarray(t_prime(np.asarray(z, dtype=float)), dtype=float)
            truth["b_fn"] = lambda z: truth["phi_fn"](z) * truth["a_fn"](z)
    return ContinuousScm(f, g, u_law, p_z, xb, zb, deriv, truth)


def example5_scm(u1_law=(1.5, 1.0), u2_law=(0.0, 1.0), u3_law=(0.0, 0.5), t: Callable = None,
                 t_prime: Callable = None, corr23: float = 0.5, z_range=(0.0, 1.0)) -> ContinuousScm:
    """Random-coefficient model Y = U1 X + U2, X = t(Z) + U3.

    Laws are (mean, sd) normals; U1 is independent of (U2, U3) while U2 and
    U3 have correlation ``corr23`` (confounding).  The effect is constant in
    x: theta = E(U1).
    """
    if t is None:
        t, t_prime = (lambda z: z), (lambda z: np.ones_like(z))
    if not -1.0 < corr23 < 1.0:
        raise ModelError("corr23 must lie in (-1, 1)")
    m1, s1 = u1_law
    m2, s2 = u2_law
    m3, s3 = u3_law
    R = np.eye(3)
    R[1, 2] = R[2, 1] = corr23
    base = _normal_u((s1, s2, s3), R)
    means = np.array([m1, m2, m3])
    u_law = lambda rng, N: base(rng, N) + means
    p_z, zb = _uniform_z(*z_range)
    tz = t(np.linspace(*z_range, 401))
    xb = (_pad_bounds(tz.min() + m3, tz.max() + m3, s3),)
    f = lambda x, u: u[:, 0] * x[:, 0] + u[:, 1]
    g = lambda z, u: (t(z[:, 0]) + u[:, 2])[:, None]
    deriv = None
    if t_prime is not None:
        deriv = (lambda x, u: u[:, :1].copy(),
                 lambda z, u: np.asarray(t_prime(z[:, 0]), dtype=float)[:, None, None] * np.ones((len(z), 1, 1)))
    truth = dict(scenario="example5", theta_true=[float(m1)], phi_true=float(m1))
    return ContinuousScm(f, g, u_law, p_z, xb, zb, deriv, truth)


def cond_ii_violation_scm(u1_law=(1.0, 0.5), z_range=(0.0, 1.0)) -> ContinuousScm:
    """Y = U1 X, X = U1 Z: the effect of X on Y and of Z on X share U1, so they
    are correlated given Z and a(z) phi(z) != b(z)."""
    m1, s1 = u1_law
    u_law = lambda rng, N: rng.normal(m1, s1, size=(N, 1))
    p_z, zb = _uniform_z(*z_range)
    zmax = max(abs(z_range[0]), abs(z_range[1]))
    span = zmax * (abs(m1) + 12 * s1)
    f = lambda x, u: u[:, 0] * x[:, 0]
    g = lambda z, u: (u[:, 0] * z[:, 0])[:, None]
    deriv = (lambda x, u: u[:, :1].copy(), lambda z, u: u[:, :1, None].copy())
    truth = dict(scenario="cond_ii_violation", phi_true=float(m1),
                 b_over_a=float((m1**2 + s1**2) / m1))
    return ContinuousScm(f, g, u_law, p_z, ((-span, span),), zb, deriv, truth)


def vector_linear_scm(effect: float = 3.0, noise_sds=(0.3, 0.3), corr: float = 0.5,
                      z_range=(0.0, 1.0)) -> ContinuousScm:
    """Two instruments, one regressor: X = Z1 + Z2 + U, Y = effect * X + U'."""
    s_u, s_v = noise_sds
    u_law = _normal_u((s_u, s_v), np.array([[1.0, corr], [corr, 1.0]]))
    p_z, zb = _uniform_z(z_range[0], z_range[1], m=2)
    f = lambda x, u: effect * x[:, 0] + u[:, 1]
    g = lambda z, u: (z[:, 0] + z[:, 1] + u[:, 0])[:, None]
    deriv = (lambda x, u: np.full((len(x), 1), effect), lambda z, u: np.ones((len(z), 2, 1)))
    xb = (_pad_bounds(2 * z_range[0], 2 * z_range[1], s_u),)
    truth = dict(scenario="vector_linear", theta_true=[effect], phi_true=float(effect))
    return ContinuousScm(f, g, u_law, p_z, xb, zb, deriv, truth)
