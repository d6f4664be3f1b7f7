"""Estimator dispatch and the Monte Carlo study harness.

Every replication is a pure function of (scenario, parameters, N, root seed,
replication keys), so results do not depend on how replications are
scheduled across worker processes.  ``IVCALC_JOBS`` sets the default number
of worker processes (1 when unset).
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import continuous_iv, discrete_iv, smooth_iv
from .dataset import ContinuousDataset, DiscreteDataset, MixedDataset
from .errors import DatasetError, IVError, IVWarning, ModelError, RegimeMismatchError
from .npreg import inner_mask
from .rng import seed_sequence
from .scenarios import get_scenario, simulate

JOBS_ENV = "IVCALC_JOBS"
# fraction of the range kept when scoring curve errors
PHI_INNER = 0.8
SPRIME_INNER = 0.6
Z95 = 1.959963984540054


@dataclass
class Outcome:
    """One estimator run: a summary vector, optional interval, scalar
    metrics, and the estimator's own result object (for file output)."""

    value: np.ndarray
    ci: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)
    result: object = None


@dataclass(frozen=True)
class Estimator:
    name: str
    kinds: tuple
    run: Callable
    target: str | None
    description: str


def _seed_opt(options: dict, seed):
    opts = dict(options)
    return opts.pop("bootstrap", None), opts.pop("seed", seed), opts


def _boot_metrics(se) -> dict:
    if se is None or np.size(se) != 1:
        return {}
    return {"boot_se": float(np.asarray(se).reshape(-1)[0])}


def _run_discrete(d, options, seed, model):
    boot, seed, opts = _seed_opt(options, seed)
    if "pairs" in opts:
        p = opts.pop("pairs")
        opts["s0"] = p if isinstance(p, str) else [tuple(x) for x in p]
    est = discrete_iv.estimate(d, bootstrap=boot, seed=seed, **opts)
    metrics = {"rank": est.rank, "cond_number": est.cond_number, **_boot_metrics(est.boot_se)}
    return Outcome(est.theta, est.boot_ci, metrics, est)


def _run_smooth(d, options, seed, model):
    boot, seed, opts = _seed_opt(options, seed)
    est = smooth_iv.estimate(d, bootstrap=boot, seed=seed, **opts)
    return Outcome(est.theta, est.boot_ci, {"gram_cond": est.cond_number, **_boot_metrics(est.boot_se)}, est)


def _phi_metrics(curve, model) -> dict:
    if model is None or not curve.is_scalar:
        return {}
    truth = model.truth
    g = curve.grid
    if "phi_fn" in truth:
        ref = np.asarray(truth["phi_fn"](g), dtype=float)
    elif "phi_true" in truth:
        ref = np.full(len(g), float(truth["phi_true"]))
    else:
        return {}
    use = curve.valid & inner_mask(g, PHI_INNER)
    if not use.any():
        return {}
    return {"phi_sup_error": float(np.max(np.abs(curve.phi[use] - ref[use])))}


def _run_phi(d, options, seed, model):
    opts = dict(options)
    vector = opts.pop("vector", False)
    if d.n == 1 and d.m == 1 and not vector:
        curve = continuous_iv.estimate_phi_scalar(d, **opts)
    else:
        curve = continuous_iv.estimate_phi_vector(d, **opts)
    phi = np.asarray(curve.phi).reshape(len(curve.grid), -1)
    metrics = {"valid_fraction": float(curve.valid.mean())}
    metrics.update(_phi_metrics(curve, model))
    return Outcome(phi[curve.valid].mean(axis=0), None, metrics, curve)


def _run_theta_constant(d, options, seed, model):
    boot, seed, opts = _seed_opt(options, seed)
    est = continuous_iv.estimate_theta_constant(d, bootstrap=boot, seed=seed, **opts)
    metrics = {"dropped_fraction": est.dropped_fraction, **_boot_metrics(est.boot_se)}
    return Outcome(np.asarray(est.theta), est.boot_ci, metrics, est)


def _run_sprime(d, options, seed, model):
    curve = continuous_iv.estimate_sprime(d, **options)
    metrics = {"lambda": curve.lam}
    fn = None if model is None else model.truth.get("theta_fn")
    if fn is not None:
        use = inner_mask(curve.x_grid, SPRIME_INNER)
        metrics["sprime_sup_error"] = float(np.max(np.abs(curve.sprime[use] - fn(curve.x_grid[use]))))
    return Outcome(np.zeros(0), None, metrics, curve)


def _run_linear_ratio(d, options, seed, model):
    r = continuous_iv.linear_iv_ratio(d)
    ci = np.array([[r.beta_hat - Z95 * r.se, r.beta_hat + Z95 * r.se]])
    return Outcome(np.array([r.beta_hat]), ci, {"se": r.se}, r)


def naive_estimate(d) -> np.ndarray:
    """Regression of Y on X ignoring Z: group-mean differences for categorical
    X, least-squares slopes for real X."""
    if isinstance(d, DiscreteDataset):
        return discrete_iv.naive_difference(d)
    if isinstance(d, MixedDataset):
        return smooth_iv.naive_difference(d)
    X = np.column_stack([np.ones(len(d)), d.x])
    return np.linalg.lstsq(X, d.y, rcond=None)[0][1:]


def _run_naive(d, options, seed, model):
    v = np.asarray(naive_estimate(d), dtype=float)
    return Outcome(v, None, {}, {"naive": v.tolist()})


ESTIMATORS: dict[str, Estimator] = {e.name: e for e in (
    Estimator("discrete", ("discrete",), _run_discrete, "theta_true",
              "contrast system over instrument-level pairs"),
    Estimator("smooth", ("mixed",), _run_smooth, "theta_true",
              "derivative curves of class probabilities and mean outcome"),
    Estimator("phi", ("continuous",), _run_phi, "phi_true", "pointwise phi(z) curve; value is its grid mean"),
    Estimator("theta_constant", ("continuous",), _run_theta_constant, "theta_true",
              "sample average of phi(Z) for constant-effect models"),
    Estimator("sprime", ("continuous",), _run_sprime, None, "regularised recovery of s'(x)"),
    Estimator("linear_ratio", ("continuous",), _run_linear_ratio, "theta_true",
              "ratio of Y-on-Z and X-on-Z slopes"),
    Estimator("naive", ("discrete", "mixed", "continuous"), _run_naive, "theta_true",
              "regression of Y on X ignoring the instrument"),
)}

KIND_OF = {DiscreteDataset: "discrete", MixedDataset: "mixed", ContinuousDataset: "continuous"}


def get_estimator(name: str) -> Estimator:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ModelError(f"unknown estimator {name!r}; available: {', '.join(sorted(ESTIMATORS))}") from None


def run_estimator(name: str, d, options: dict | None = None, seed=None, model=None) -> Outcome:
    est = get_estimator(name)
    kind = KIND_OF[type(d)]
    if kind not in est.kinds:
        raise RegimeMismatchError(f"estimator {name!r} needs {' or '.join(est.kinds)} data, got {kind} data")
    return est.run(d, dict(options or {}), seed, model)


# --------------------------------------------------------------------------
# study


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    options: dict = field(default_factory=dict)
    label: str | None = None

    @property
    def key(self) -> str:
        return self.label or self.name


@dataclass(frozen=True)
class StudyConfig:
    scenario: str
    params: dict
    estimators: tuple
    sample_sizes: tuple
    replications: int
    seed: int
    outputs: str = "study_out"
    include_naive: bool = True

    def __post_init__(self):
        if int(self.replications) < 1:
            raise ModelError("replications must be at least 1")
        if not self.sample_sizes or any(int(n) <= 0 for n in self.sample_sizes):
            raise ModelError("sample_sizes must be a nonempty list of positive integers")
        get_scenario(self.scenario)
        for e in self.estimators:
            get_estimator(e.name)

    def estimator_list(self) -> list:
        ests = list(self.estimators)
        if self.include_naive and not any(e.name == "naive" for e in ests):
            ests.append(EstimatorSpec("naive"))
        return ests


@dataclass
class StudyResult:
    config: StudyConfig
    records: list
    summary: list
    timing: dict


def replication_seeds(root: int, size_index: int, rep: int):
    """(simulation seed, estimator seed) for one replication."""
    base = seed_sequence(root)
    key = tuple(base.spawn_key) + (size_index, rep)
    return (np.random.SeedSequence(base.entropy, spawn_key=key + (0,)),
            np.random.SeedSequence(base.entropy, spawn_key=key + (1,)))


def _replicate(task):
    scenario, params, N, root, size_index, rep, estimators = task
    model = get_scenario(scenario).build(params)
    sim_seed, est_seed = replication_seeds(root, size_index, rep)
    try:
        d = simulate(model, N, sim_seed)
    except (ModelError, DatasetError) as exc:
        return [dict(N=N, rep=rep, estimator=e.key, ok=False, error=f"simulation: {exc}") for e in estimators]
    rows = []
    for e in estimators:
        row = dict(N=N, rep=rep, estimator=e.key, ok=True, error="")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IVWarning)
                out = run_estimator(e.name, d, e.options, est_seed, model)
            row.update(value=np.asarray(out.value, dtype=float).reshape(-1).tolist(),
                       ci=None if out.ci is None else np.asarray(out.ci).tolist(), metrics=out.metrics)
        except (IVError, ValueError, np.linalg.LinAlgError) as exc:
            row.update(ok=False, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise ModelError(f"{JOBS_ENV} must be a positive integer") from None


def run_study(config: StudyConfig, jobs: int | None = None) -> StudyResult:
    """Run all replications and summarise per (estimator, N, component)."""
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    ests = tuple(config.estimator_list())
    tasks = [(config.scenario, config.params, int(N), int(config.seed), i, r, ests)
             for i, N in enumerate(config.sample_sizes) for r in range(int(config.replications))]
    t0 = time.perf_counter()
    if jobs == 1:
        chunks = [_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_replicate, tasks))
    records = [r for c in chunks for r in c]
    model = get_scenario(config.scenario).build(config.params)
    summary = summarize(records, ests, model.truth, config.sample_sizes)
    return StudyResult(config, records, summary, {"seconds": time.perf_counter() - t0, "jobs": jobs})


def _truth_vector(truth: dict, target: str | None):
    if target is None or target not in truth:
        return None
    return np.atleast_1d(np.asarray(truth[target], dtype=float))


def summarize(records: list, estimators, truth: dict, sample_sizes) -> list:
    """Bias, SD, RMSE, coverage and failure rate per estimator, N and
    component.  SD is None with a single successful replication."""
    rows = []
    for e in estimators:
        target = _truth_vector(truth, get_estimator(e.name).target)
        for N in sample_sizes:
            recs = [r for r in records if r["estimator"] == e.key and r["N"] == int(N)]
            ok = [r for r in recs if r["ok"]]
            fail = 1.0 - len(ok) / len(recs) if recs else 0.0
            if not ok:
                rows.append(dict(estimator=e.key, N=int(N), component=0, n_ok=0, failure_rate=fail))
                continue
            vals = np.array([r["value"] for r in ok], dtype=float).reshape(len(ok), -1)
            metric_names = sorted({k for r in ok for k in r["metrics"]})
            for j in range(max(1, vals.shape[1])):
                row = dict(estimator=e.key, N=int(N), component=j, n_ok=len(ok), failure_rate=fail)
                if j < vals.shape[1]:
                    col = vals[:, j]
                    row.update(mean=float(np.mean(col)), sd=float(np.std(col, ddof=1)) if len(col) > 1 else None)
                    if target is not None and j < len(target):
                        err = col - target[j]
                        row.update(truth=float(target[j]), bias=float(err.mean()),
                                   rmse=float(np.sqrt(np.mean(err**2))))
                        cis = [r["ci"] for r in ok if r["ci"] is not None]
                        if len(cis) == len(ok):
                            c = np.array(cis, dtype=float)[:, j]
                            row["coverage"] = float(np.mean((c[:, 0] <= target[j]) & (target[j] <= c[:, 1])))
                for k in metric_names:
                    m = [r["metrics"][k] for r in ok if k in r["metrics"]]
                    if m and all(isinstance(x, (int, float)) for x in m):
                        row[f"mean_{k}"] = float(np.mean(m))
                rows.append(row)
    return rows
