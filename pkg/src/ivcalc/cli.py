"""Command-line front end: ``simulate``, ``estimate`` and ``study``.

Configs are YAML files; see the README for the keys.  ``--set a.b=value``
overrides a nested key (the value is parsed as YAML, so ``--set seed=3`` is
an integer and ``--set sample_sizes=[100,200]`` a list).

Exit codes: 0 success, 1 usage or config error, 2 estimation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import yaml

from .dataset import DatasetSchema, load_csv, save_csv
from .discrete_iv import _jsonable
from .errors import DatasetError, IVError, ModelError
from .scenarios import REGISTRY, get_scenario, simulate, truth_record
from .study import ESTIMATORS, EstimatorSpec, StudyConfig, get_estimator, run_estimator, run_study

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATION = 0, 1, 2


class ConfigError(Exception):
    """Invalid config or command line; ``path`` names the offending key."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class EstimationFailure(Exception):
    """The data do not fit the chosen estimator."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config handling


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        cfg = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a mapping", path)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = json.loads(json.dumps(cfg))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like key=value", "--set")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = cfg
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError("cannot set a key below a non-mapping value", ".".join(parts[:i + 1]))
            node = nxt
        node[parts[-1]] = value
    return cfg


def _scenario_of(cfg: dict) -> tuple[str, dict]:
    sc = cfg.get("scenario")
    params = cfg.get("params", {})
    if isinstance(sc, dict):
        params = sc.get("params", params)
        sc = sc.get("name")
    if not isinstance(sc, str):
        raise ConfigError("a scenario name is required; registered: " + ", ".join(sorted(REGISTRY)), "scenario")
    if not isinstance(params, dict):
        raise ConfigError("must be a mapping", "scenario.params")
    try:
        get_scenario(sc)
    except ModelError as exc:
        raise ConfigError(str(exc), "scenario") from None
    return sc, params


def _positive_int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < 1:
        raise ConfigError(f"must be a positive integer, got {v!r}", path)
    return int(v)


def _seed(cfg: dict) -> int:
    s = cfg.get("seed", 0)
    if isinstance(s, bool) or not isinstance(s, int) or s < 0:
        raise ConfigError(f"must be a nonnegative integer, got {s!r}", "seed")
    return s


def _estimators(cfg: dict) -> tuple:
    raw = cfg.get("estimators")
    if raw is None:
        raise ConfigError("list at least one estimator", "estimators")
    if isinstance(raw, (str, dict)):
        raw = [raw]
    specs = []
    for i, e in enumerate(raw):
        path = f"estimators[{i}]"
        if isinstance(e, str):
            e = {"name": e}
        if not isinstance(e, dict) or "name" not in e:
            raise ConfigError("must be a name or a mapping with a name", path)
        if e["name"] not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e['name']!r}; available: {', '.join(sorted(ESTIMATORS))}",
                              f"{path}.name")
        opts = e.get("options", {}) or {}
        if not isinstance(opts, dict):
            raise ConfigError("must be a mapping", f"{path}.options")
        specs.append(EstimatorSpec(e["name"], opts, e.get("label")))
    keys = [s.key for s in specs]
    if len(set(keys)) != len(keys):
        raise ConfigError("estimator labels must be unique (add a label)", "estimators")
    return tuple(specs)


def study_config(cfg: dict) -> StudyConfig:
    name, params = _scenario_of(cfg)
    sizes = cfg.get("sample_sizes", cfg.get("sample_size"))
    if sizes is None:
        raise ConfigError("required", "sample_sizes")
    sizes = sizes if isinstance(sizes, list) else [sizes]
    sizes = tuple(_positive_int(v, f"sample_sizes[{i}]") for i, v in enumerate(sizes))
    reps = _positive_int(cfg.get("replications", 1), "replications")
    kind = get_scenario(name).kind
    ests = _estimators(cfg)
    for i, e in enumerate(ests):
        if kind not in get_estimator(e.name).kinds:
            raise ConfigError(f"estimator {e.name!r} does not apply to {kind} scenario {name!r}",
                              f"estimators[{i}].name")
    naive = cfg.get("include_naive", True)
    if not isinstance(naive, bool):
        raise ConfigError("must be true or false", "include_naive")
    return StudyConfig(name, params, ests, sizes, reps, _seed(cfg), str(cfg.get("outputs", "study_out")), naive)


# --------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def write_table(path: Path, header: list, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _curve_tables(out: Path, name: str, result) -> list:
    """Plot-ready CSV tables for an estimator result; returns file names."""
    files = []
    if name == "discrete":
        A, b = np.atleast_2d(result.extra["A"]), result.extra["b"]
        res = result.extra["residuals"]
        n = A.shape[1]
        rows = [[p[0], p[1], *A[i], b[i], res[i]] for i, p in enumerate(result.extra["pairs"])]
        write_table(out / "contrasts.csv", ["level_i", "level_k", *[f"a_{j + 1}" for j in range(n)], "b",
                                            "residual"], rows)
        files.append("contrasts.csv")
    elif name == "smooth":
        s = result.extra["system"]
        q, af = s.extra["q"], s.a_full
        k = q.shape[1]
        rows = [[s.grid[g], *q[g], *af[g], s.b_curve[g], s.extra["mu"][g], s.weights[g],
                 result.extra["residual_curve"][g]] for g in range(len(s.grid))]
        write_table(out / "curves.csv", ["z", *[f"q_{j}" for j in range(k)], *[f"a_{j}" for j in range(k)],
                                         "b", "mu", "weight", "residual"], rows)
        files.append("curves.csv")
    elif name in ("phi", "theta_constant", "sprime"):
        curve = result.phi if name == "theta_constant" else result.extra["phi"] if name == "sprime" else result
        files.append(_phi_table(out, curve))
        if name == "sprime":
            write_table(out / "sprime.csv", ["x", "sprime"], zip(result.x_grid, result.sprime))
            files.append("sprime.csv")
            lc = result.extra.get("lcurve")
            if lc:
                write_table(out / "lcurve.csv", ["lambda", "residual_norm", "solution_norm"],
                            zip(lc["lambdas"], lc["residual_norms"], lc["solution_norms"]))
                files.append("lcurve.csv")
    return files


def _phi_table(out: Path, curve) -> str:
    G = len(curve.grid)
    grid = np.asarray(curve.grid).reshape(G, -1)
    phi = np.asarray(curve.phi).reshape(G, -1)
    a = np.asarray(curve.a_vals).reshape(G, -1)
    b = np.asarray(curve.b_vals).reshape(G, -1)
    zc = ["z"] if grid.shape[1] == 1 else [f"z{i + 1}" for i in range(grid.shape[1])]
    pc = ["phi"] if phi.shape[1] == 1 else [f"phi_{j + 1}" for j in range(phi.shape[1])]
    ac = ["a"] if a.shape[1] == 1 else [f"a_{i}" for i in range(a.shape[1])]
    bc = ["b"] if b.shape[1] == 1 else [f"b_{i + 1}" for i in range(b.shape[1])]
    rows = [[*grid[g], *phi[g], *a[g], *b[g], bool(curve.valid[g]), curve.reasons[g]] for g in range(G)]
    write_table(out / "phi.csv", zc + pc + ac + bc + ["valid", "reason"], rows)
    return "phi.csv"


def _result_dict(name: str, outcome) -> dict:
    r = outcome.result
    if hasattr(r, "to_dict"):
        d = r.to_dict()
    elif name in ("phi", "sprime"):
        d = {}
    else:
        d = dict(r) if isinstance(r, dict) else {}
    if name == "phi":
        d.update(bandwidths=r.extra.get("bandwidths", [r.extra.get("bandwidth_x"), r.extra.get("bandwidth_y")]),
                 n_valid=int(r.valid.sum()), n_grid=len(r.valid),
                 masked={c: int(np.sum(r.reasons == c)) for c in sorted(set(r.reasons.tolist())) if c})
    if name == "sprime":
        d.update(lam=r.lam, residual_norm=r.residual_norm, solution_norm=r.solution_norm)
    d["value"] = outcome.value
    d["metrics"] = outcome.metrics
    return d


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    name, params = _scenario_of(cfg)
    N = _positive_int(cfg.get("sample_size", cfg.get("n", 1000)), "sample_size")
    seed = _seed(cfg)
    sc = get_scenario(name)
    try:
        model = sc.build(params)
    except ModelError as exc:
        raise ConfigError(str(exc), "scenario.params") from None
    d = simulate(model, N, seed)
    out = Path(args.out or cfg.get("outputs", "simulate_out"))
    out.mkdir(parents=True, exist_ok=True)
    save_csv(d, out / "dataset.csv")
    truth = truth_record(sc, model)
    truth.update(sample_size=N, seed=seed, params=params)
    write_json(out / "truth.json", truth)
    print(f"wrote {N} rows of {name} ({sc.kind}) to {out / 'dataset.csv'}")
    return EXIT_OK


def _dataset_kind(estimator: str, path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    kinds = get_estimator(estimator).kinds
    if len(kinds) == 1:
        return kinds[0]
    side = path.with_name("truth.json")
    if side.is_file():
        return json.loads(side.read_text(encoding="utf-8")).get("kind", kinds[0])
    raise ConfigError(f"estimator {estimator!r} accepts several data kinds; pass --kind", "--kind")


def cmd_estimate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    name = args.estimator or cfg.get("estimator")
    if name is None:
        raise ConfigError("choose an estimator with --estimator", "estimator")
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; available: {', '.join(sorted(ESTIMATORS))}", "estimator")
    options = cfg.get("options", {}) or {}
    if not isinstance(options, dict):
        raise ConfigError("must be a mapping", "options")
    seed = args.seed if args.seed is not None else _seed(cfg)
    path = Path(args.dataset)
    if not path.is_file():
        raise ConfigError(f"dataset {path} not found", "dataset")
    kind = _dataset_kind(name, path, args.kind)
    try:
        d = load_csv(path, DatasetSchema(kind))
    except DatasetError as exc:
        raise EstimationFailure(f"dataset does not match the {kind} schema required by {name!r}: {exc}") from None
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            outcome = run_estimator(name, d, options, seed)
        except TypeError as exc:
            raise ConfigError(f"bad estimator option: {exc}", "options") from None
    out = Path(args.out or cfg.get("outputs", "estimate_out"))
    out.mkdir(parents=True, exist_ok=True)
    files = _curve_tables(out, name, outcome.result)
    result = dict(estimator=name, kind=kind, dataset=str(path), n_rows=len(d), seed=seed, options=options,
                  result=_result_dict(name, outcome), warnings=[str(w.message) for w in caught], tables=files,
                  timing={"seconds": time.perf_counter() - t0})
    write_json(out / "result.json", result)
    print(f"{name}: value {np.round(outcome.value, 6).tolist()} -> {out / 'result.json'}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.estimator:
        cfg["estimators"] = [args.estimator]
    config = study_config(cfg)
    out = Path(args.out or config.outputs)
    res = run_study(config, jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["estimator", "N", "component", "n_ok", "failure_rate", "mean", "sd", "truth", "bias", "rmse",
            "coverage"]
    extra = sorted({k for r in res.summary for k in r if k not in cols})
    write_table(out / "summary.csv", cols + extra, ([r.get(c) for c in cols + extra] for r in res.summary))
    width = max((len(r.get("value", [])) for r in res.records), default=0)
    write_table(out / "replications.csv",
                ["N", "rep", "estimator", "ok", "error", *[f"value_{j}" for j in range(width)],
                 *[f"ci_{j}_{s}" for j in range(width) for s in ("lo", "hi")]],
                ([r["N"], r["rep"], r["estimator"], r["ok"], r["error"],
                  *(r.get("value", []) + [None] * (width - len(r.get("value", [])))),
                  *(np.asarray(r["ci"]).reshape(-1).tolist() if r.get("ci") is not None else [None] * 2 * width)]
                 for r in res.records))
    write_json(out / "study.json", dict(
        scenario=config.scenario, params=config.params, seed=config.seed, sample_sizes=list(config.sample_sizes),
        replications=config.replications,
        estimators=[dict(name=e.name, label=e.key, options=e.options) for e in config.estimator_list()],
        summary=res.summary, timing=res.timing))
    for r in res.summary:
        bias = r.get("bias")
        print(f"{r['estimator']:>16} N={r['N']:<8} comp={r['component']} mean={_short(r.get('mean'))} "
              f"sd={_short(r.get('sd'))} bias={_short(bias)} rmse={_short(r.get('rmse'))} "
              f"fail={r['failure_rate']:.3f}")
    return EXIT_OK


def _short(v):
    return "-" if v is None else f"{v:.4g}"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivcalc", description="Instrumental-variable estimation, simulation and studies.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path, YAML value)")

    s = sub.add_parser("simulate", help="draw a dataset from a registered scenario")
    common(s)
    s.set_defaults(func=cmd_simulate)
    e = sub.add_parser("estimate", help="run one estimator on a CSV dataset")
    e.add_argument("dataset", help="CSV file")
    e.add_argument("--estimator", choices=sorted(ESTIMATORS))
    e.add_argument("--kind", choices=("discrete", "mixed", "continuous"), help="dataset kind when ambiguous")
    common(e)
    e.set_defaults(func=cmd_estimate)
    st = sub.add_parser("study", help="Monte Carlo study over replications and sample sizes")
    st.add_argument("--estimator", choices=sorted(ESTIMATORS), help="replace the configured estimator list")
    st.add_argument("--jobs", type=int, help="worker processes (default: $IVCALC_JOBS or 1)")
    common(st)
    st.set_defaults(func=cmd_study)
    sub.add_parser("scenarios", help="list registered scenarios").set_defaults(func=cmd_scenarios)
    return p


def cmd_scenarios(args) -> int:
    for name in sorted(REGISTRY):
        sc = REGISTRY[name]
        print(f"{name:<22} {sc.kind:<11} {sc.description}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationFailure, IVError, DatasetError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
