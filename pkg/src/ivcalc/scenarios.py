"""Named structural models that configs and studies refer to.

Each entry maps a scenario name to its regime and a builder taking plain
keyword parameters (numbers, lists, dicts), so a scenario can be described
in a text config.  :func:`truth_record` turns a model's ground truth into a
JSON-ready dict for sidecar files.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import scm_sim
from .errors import ModelError


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: str
    builder: Callable
    description: str
    provenance: str

    def build(self, params: dict | None = None):
        params = dict(params or {})
        allowed = inspect.signature(self.builder).parameters
        unknown = sorted(set(params) - set(allowed))
        if unknown:
            raise ModelError(f"scenario {self.name!r} has no parameter(s) {unknown}; "
                             f"accepted: {sorted(k for k in allowed if k not in _CALLABLE_PARAMS)}")
        if any(k in _CALLABLE_PARAMS for k in params):
            raise ModelError("function-valued parameters cannot be set from a config")
        params = {k: _coerce(v) for k, v in params.items()}
        try:
            return self.builder(**params)
        except (TypeError, ValueError) as exc:
            raise ModelError(f"scenario {self.name!r}: {exc}") from exc


_CALLABLE_PARAMS = {"s", "t", "s_prime", "t_prime", "u_law", "z_law", "eps_law"}


def _coerce(v):
    if isinstance(v, list):
        return tuple(_coerce(x) for x in v)
    return v


def _example3(compliance=None, outcome_law=None, p_z=(0.5, 0.5)):
    spec = dict(compliance or {"never": 0.2, "complier": 0.6, "always": 0.2})
    law = None
    if outcome_law is not None:
        law = {k: [tuple(a) for a in v] for k, v in outcome_law.items()}
    return scm_sim.example3_scm(spec, law, p_z)


def _discrete_random(seed=0, n=2, m=4, n_v_atoms=6, n_d_atoms=4, confounded=True):
    model = scm_sim.random_discrete_scm(seed, n, m, n_v_atoms, n_d_atoms, confounded)
    model.truth["theta_true"] = model.theta().tolist()
    return model


REGISTRY: dict[str, Scenario] = {}


def register(scenario: Scenario) -> Scenario:
    REGISTRY[scenario.name] = scenario
    return scenario


for _s in (
    Scenario("example1", "continuous", scm_sim.example1_scm,
             "errors in variables with a linear structural map",
             "theta and phi equal beta; naive slope from the closed-form attenuation"),
    Scenario("example2", "mixed", scm_sim.example2_scm,
             "program participation with a binary treatment and a scalar instrument",
             "theta equals beta1 because mu(z) = beta0 + beta1 q(z)"),
    Scenario("example3", "discrete", _example3,
             "binary noncompliance with explicit compliance-type and outcome atoms",
             "theta is the exact atom average of U_1 - U_0"),
    Scenario("example3_engineered", "discrete", scm_sim.example3_engineered,
             "binary noncompliance with a prescribed effect/compliance correlation",
             "theta set by construction; the identity holds only when cond_i_corr is 0"),
    Scenario("example4", "continuous", scm_sim.example4_scm,
             "additive model Y = X^2 + U1, X = Z + U2",
             "phi(z) = E(2(z + U2)) = 2z from Gaussian quadrature; s'(x) = 2x"),
    Scenario("example5", "continuous", scm_sim.example5_scm,
             "random-coefficient model Y = U1 X + U2",
             "theta equals the mean of U1"),
    Scenario("multiclass", "mixed", scm_sim.multiclass_scm,
             "three-level treatment from an ordered-logistic index",
             "theta set by construction; identity fails when violate is nonzero"),
    Scenario("cond_ii_violation", "continuous", scm_sim.cond_ii_violation_scm,
             "shared coefficient in both structural maps",
             "b/a = (mean^2 + sd^2)/mean differs from the mean of U1"),
    Scenario("vector_linear", "continuous", scm_sim.vector_linear_scm,
             "one regressor with two instruments",
             "phi is the constant effect"),
    Scenario("discrete_random", "discrete", _discrete_random,
             "random finite model satisfying the identifying condition exactly",
             "theta is the exact atom average"),
):
    register(_s)


def get_scenario(name: str) -> Scenario:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ModelError(f"unknown scenario {name!r}; registered scenarios: {', '.join(sorted(REGISTRY))}") \
            from None


def simulate(model, N: int, seed=None):
    if isinstance(model, scm_sim.DiscreteScm):
        return scm_sim.simulate_discrete(model, N, seed)
    if isinstance(model, scm_sim.MixedScm):
        return scm_sim.simulate_mixed(model, N, seed)
    return scm_sim.simulate_continuous(model, N, seed)


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def truth_record(scenario: Scenario, model, grid_size: int = 41) -> dict:
    """Ground truth of ``model`` with curves on a grid where available."""
    out = {"scenario": scenario.name, "kind": scenario.kind, "provenance": scenario.provenance}
    out.update({k: _plain(v) for k, v in model.truth.items() if not callable(v)})
    if isinstance(model, scm_sim.DiscreteScm):
        rep = scm_sim.exact_population_oracle(model)
        out.update(theta_true=model.theta().tolist(), A_pop=rep.A_pop.tolist(), b_pop=rep.b_pop.tolist(),
                   identity_residual=rep.identity_residual, cond_i_corr_pop=_plain(rep.cond_i_corr),
                   pairs=[list(p) for p in rep.pairs])
    elif isinstance(model, scm_sim.MixedScm):
        z = np.linspace(0.0, 1.0, grid_size)
        out.update(theta_true=model.theta().tolist(), cond_i_holds=bool(model.cond_i_holds()),
                   curves={"z": z.tolist(), "q": model.q(z).tolist(), "a": model.a_curves(z).tolist(),
                           "b": model.b_curve(z).tolist()})
    elif model.m == 1:
        lo, hi = model.z_bounds[0]
        z = np.linspace(lo, hi, grid_size)
        if "phi_fn" in model.truth:
            out["curves"] = {"z": z.tolist(), "phi": np.asarray(model.truth["phi_fn"](z)).tolist()}
        elif "phi_true" in model.truth:
            out["curves"] = {"z": z.tolist(), "phi": np.full(grid_size, model.truth["phi_true"]).tolist()}
    return out
