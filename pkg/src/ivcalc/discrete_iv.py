"""Causal effects of a categorical treatment with a categorical instrument.

For each pair of instrument levels {i, k} the differences

    b_s  = E(Y | Z = z_k) - E(Y | Z = z_i)
    a_sj = P(X = x_j | Z = z_k) - P(X = x_j | Z = z_i),   j = 1..n

satisfy ``A theta = b`` with ``theta_j = E(U_j - U_0)`` whenever the change in
Y caused by moving X is uncorrelated with the change in X caused by moving Z.
The baseline level x_0 drops out of the system, so only columns 1..n appear.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Literal

import numpy as np

from .dataset import DiscreteDataset, GroupStats, group_stats
from .errors import EmptyGroupError, IVWarning, UnderidentifiedError
from .rng import substream

RANK_TOL = 1e-8
WEAK_COND = 1e6
DEFAULT_BOOTSTRAP = 500


@dataclass(frozen=True)
class PairSet:
    """Unordered pairs of instrument levels (0-based Z codes).

    Each pair is stored as ``(i, k)`` with ``i < k``; the contrast it
    contributes is "level k minus level i".
    """

    pairs: tuple

    def __post_init__(self):
        canon = []
        for p in self.pairs:
            i, k = (int(v) for v in p)
            if i == k:
                raise ValueError(f"pair {p} repeats a level")
            if min(i, k) < 0:
                raise ValueError(f"pair {p} has a negative level")
            canon.append((min(i, k), max(i, k)))
        if len(set(canon)) != len(canon):
            raise ValueError("duplicate pairs in PairSet")
        object.__setattr__(self, "pairs", tuple(canon))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @classmethod
    def all_pairs(cls, m: int) -> "PairSet":
        return cls(tuple(combinations(range(m), 2)))

    @classmethod
    def spanning(cls, m: int, base: int = 0) -> "PairSet":
        """Pairs (base, k) for every other level k."""
        return cls(tuple((base, k) for k in range(m) if k != base))


def resolve_pairs(s0: PairSet | Iterable | str | None, m: int) -> PairSet:
    if s0 is None or (isinstance(s0, str) and s0 == "all-pairs"):
        return PairSet.all_pairs(m)
    if isinstance(s0, str) and s0 == "spanning":
        return PairSet.spanning(m)
    if isinstance(s0, str):
        raise ValueError(f"unknown pair-set name {s0!r}; use 'all-pairs' or 'spanning'")
    ps = s0 if isinstance(s0, PairSet) else PairSet(tuple(s0))
    for i, k in ps:
        if k >= m:
            raise ValueError(f"pair {(i, k)} refers to a level beyond 0..{m - 1}")
    return ps


@dataclass
class ContrastSystem:
    A: np.ndarray
    b: np.ndarray
    pair_labels: tuple
    b_se: np.ndarray | None = None


@dataclass
class ThetaEstimate:
    """Estimated effect vector with identification diagnostics.

    ``boot_ci`` is an (n, 2) array of percentile intervals when a bootstrap
    was requested.  ``extra`` carries estimator-specific diagnostics (curves,
    residuals, bandwidths) that the CLI serialises.
    """

    theta: np.ndarray
    rank: int
    cond_number: float
    residual_norm: float
    boot_ci: np.ndarray | None = None
    boot_se: np.ndarray | None = None
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta.tolist(),
            "rank": int(self.rank),
            "cond_number": _jsonable(self.cond_number),
            "residual_norm": _jsonable(self.residual_norm),
            "warnings": list(self.warnings),
        }
        if self.boot_ci is not None:
            out["boot_ci"] = self.boot_ci.tolist()
            out["boot_se"] = self.boot_se.tolist()
        for k, v in self.extra.items():
            if isinstance(v, (int, float, str, list, tuple, dict, np.generic)) or (
                    isinstance(v, np.ndarray) and v.ndim == 0):
                out[k] = _jsonable(v)
        return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def build_contrasts(stats: GroupStats, s0: PairSet | str | None = None) -> ContrastSystem:
    """Assemble (A, b) over the pair set from grouped statistics."""
    ps = resolve_pairs(s0, stats.m)
    n = stats.n
    A = np.empty((len(ps), n))
    b = np.empty(len(ps))
    se = np.empty(len(ps))
    counts = np.asarray(stats.group_counts, dtype=float)
    for r, (i, k) in enumerate(ps):
        if stats.empty[i] or stats.empty[k]:
            raise EmptyGroupError((i, k))
        A[r] = stats.cond_prob_x[k, 1:] - stats.cond_prob_x[i, 1:]
        b[r] = stats.cond_mean_y[k] - stats.cond_mean_y[i]
        se[r] = np.sqrt(stats.cond_var_y[k] / counts[k] + stats.cond_var_y[i] / counts[i])
    return ContrastSystem(A, b, ps.pairs, se)


@dataclass
class RankReport:
    rank: int
    cond_number: float
    singular_values: np.ndarray


def check_rank(system: ContrastSystem, tol: float = RANK_TOL) -> RankReport:
    """Numerical rank of A: singular values above ``tol`` times the largest."""
    A = np.atleast_2d(system.A)
    n = A.shape[1]
    if A.size == 0:
        return RankReport(0, np.inf, np.zeros(0))
    s = np.linalg.svd(A, compute_uv=False)
    smax = s[0] if len(s) else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    cond = float(smax / s[n - 1]) if rank >= n and len(s) >= n else np.inf
    return RankReport(rank, cond, s)


def solve_theta(system: ContrastSystem, tol: float = RANK_TOL, weighted: bool = False) -> ThetaEstimate:
    """Least-squares solution of A theta = b.

    Raises :class:`UnderidentifiedError` when rank(A) < n, reporting the null
    space.  With more contrasts than unknowns a residual that is large
    relative to the contrasts' sampling error is flagged as model misfit.
    ``weighted`` scales each row by the inverse standard error of ``b``.
    """
    A = np.atleast_2d(np.asarray(system.A, dtype=float))
    b = np.asarray(system.b, dtype=float)
    n = A.shape[1]
    rep = check_rank(system, tol)
    if rep.rank < n:
        _, s, vt = np.linalg.svd(A) if A.size else (None, np.zeros(0), np.eye(n))
        smax = s[0] if len(s) else 0.0
        keep = int(np.sum(s > tol * smax)) if smax > 0 else 0
        raise UnderidentifiedError(rep.rank, n, vt[keep:].T)
    notes = []
    if weighted:
        if system.b_se is None or not np.all(np.asarray(system.b_se) > 0):
            raise ValueError("weighted solve needs positive standard errors for b")
        wts = 1.0 / np.asarray(system.b_se)
        theta = np.linalg.lstsq(A * wts[:, None], b * wts, rcond=None)[0]
    else:
        theta = np.linalg.lstsq(A, b, rcond=None)[0]
    resid = b - A @ theta
    if rep.cond_number > WEAK_COND:
        notes.append(f"weak instrument: condition number {rep.cond_number:.3g} exceeds {WEAK_COND:.0e}")
    if len(b) > n and system.b_se is not None:
        se = np.asarray(system.b_se)
        ok = se > 0
        if np.any(ok) and np.max(np.abs(resid[ok]) / se[ok]) > 4.0:
            notes.append("overidentified contrasts disagree beyond sampling error (possible misspecification)")
    for msg in notes:
        warnings.warn(msg, IVWarning, stacklevel=2)
    return ThetaEstimate(theta, rep.rank, rep.cond_number, float(np.linalg.norm(resid)), warnings=notes,
                         extra={"residuals": resid})


def percentile_summary(draws: np.ndarray, level: float = 0.95):
    draws = np.asarray(draws, dtype=float)
    alpha = (1.0 - level) / 2.0
    ci = np.column_stack([np.quantile(draws, alpha, axis=0), np.quantile(draws, 1 - alpha, axis=0)])
    return ci, draws.std(axis=0, ddof=1)


def bootstrap_counts(N: int, seed, b: int) -> np.ndarray:
    """Row-resampling multiplicities for bootstrap replicate ``b``."""
    return np.bincount(substream(seed, b).integers(0, N, N), minlength=N).astype(float)


def estimate(d: DiscreteDataset, s0: PairSet | Iterable | Literal["all-pairs", "spanning"] = "all-pairs",
             bootstrap: int | None = None, seed=None, tol: float = RANK_TOL,
             weighted: bool = False) -> ThetaEstimate:
    """End-to-end estimate: grouped statistics, contrasts, rank check, solve.

    With ``bootstrap=B`` rows are resampled B times (substream ``b`` of
    ``seed``) and 95% percentile intervals are attached.  Replicates in which
    a referenced level ends up empty or the system loses rank are skipped
    and counted in ``extra['boot_failed']``.
    """
    if len(d) == 0:
        raise ValueError("dataset is empty")
    stats = group_stats(d)
    system = build_contrasts(stats, s0)
    est = solve_theta(system, tol, weighted)
    est.extra.update(pairs=[list(p) for p in system.pair_labels], A=system.A, b=system.b,
                     group_counts=stats.group_counts)
    if bootstrap:
        draws = []
        failed = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IVWarning)
            for rep in range(int(bootstrap)):
                w = bootstrap_counts(len(d), seed, rep)
                try:
                    st = group_stats(d, weights=w)
                    draws.append(solve_theta(build_contrasts(st, PairSet(system.pair_labels)),
                                             tol, weighted).theta)
                except (EmptyGroupError, UnderidentifiedError, ValueError):
                    failed += 1
        if len(draws) >= 2:
            est.boot_ci, est.boot_se = percentile_summary(np.array(draws))
        est.extra["boot_failed"] = failed
    return est


def naive_difference(d: DiscreteDataset) -> np.ndarray:
    """E(Y | X = x_j) - E(Y | X = x_0) for j = 1..n (no instrument)."""
    k = d.n + 1
    cnt = np.bincount(d.x, minlength=k).astype(float)
    s = np.bincount(d.x, weights=d.y, minlength=k)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / cnt
    return mean[1:] - mean[0]
