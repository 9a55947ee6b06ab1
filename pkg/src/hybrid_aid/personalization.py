"""Fit the six most influential controller-model parameters to a training trace."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from . import _kernels as K
from .model import ModelError, PatientParameters, find_steady_state, u_to_mu_per_min
from .scenarios import STEP

FIT_PARAMS = ("k_e", "V_G_per_kg", "SI1", "SI2", "tau_D", "tau_S")


class FitFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class FitInputs:
    """Controller-visible training data on the CGM grid."""

    cgm: np.ndarray  # mg/dL
    insulin: np.ndarray  # mU/min held over each step
    meals: np.ndarray  # announced grams at each step start
    Ts: float = STEP

    def __post_init__(self):
        n = len(self.cgm)
        if len(self.insulin) != n or len(self.meals) != n:
            raise ValueError("cgm, insulin and meals must share one grid")

    @classmethod
    def from_trace(cls, trace) -> FitInputs:
        u_h = trace["basal"] + (trace["prandial"] + trace["correction"]) * 60.0 / STEP
        return cls(np.asarray(trace["cgm"], float), u_to_mu_per_min(np.asarray(u_h, float)),
                   np.asarray(trace["announced_g"], float))


@dataclass(frozen=True)
class FitProblem:
    inputs: FitInputs
    base: PatientParameters  # population values at the subject's body weight
    lower: float = 0.2
    upper: float = 5.0
    n_starts: int = 5
    max_evals: int = 2000
    xatol: float = 1e-4
    seed: int = 0
    substeps: int = 5

    def __post_init__(self):
        if not 0 < self.lower < 1 < self.upper:
            raise ValueError("bounds must bracket the population value")
        if len(self.inputs.cgm) * self.inputs.Ts < 3 * 1440:
            raise ValueError("training trace must cover at least 3 days")


@dataclass
class FitResult:
    params: PatientParameters
    rmse: float
    iterations: int
    converged: bool
    bound_active: bool = False
    start_rmse: list[float] = field(default_factory=list)
    population_rmse: float = math.nan

    @property
    def flatness(self) -> float:
        """Spread of the three best start RMSEs; near zero hints at a flat landscape."""
        best = sorted(r for r in self.start_rmse if math.isfinite(r))[:3]
        return best[-1] - best[0] if len(best) > 1 else 0.0

    def fitted_values(self) -> dict[str, float]:
        return {name: getattr(self.params, name) for name in FIT_PARAMS}

    def to_json(self) -> str:
        return json.dumps({
            "params": self.params.to_dict(), "rmse": self.rmse, "iterations": self.iterations,
            "converged": self.converged, "bound_active": self.bound_active,
            "start_rmse": self.start_rmse, "population_rmse": self.population_rmse,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> FitResult:
        d = json.loads(text)
        return cls(PatientParameters(**d["params"]), d["rmse"], d["iterations"], d["converged"],
                   d["bound_active"], d["start_rmse"], d["population_rmse"])


def simulate_for_fit(params: PatientParameters, inputs: FitInputs, substeps: int = 5) -> np.ndarray:
    """Open-loop glucose prediction from equilibrium at the first CGM value."""
    x0, _ = find_steady_state(float(inputs.cgm[0]), params)
    return K.simulate_glucose(x0, params.theta, inputs.insulin, inputs.meals, inputs.Ts, substeps)


def rmse(params: PatientParameters, inputs: FitInputs, substeps: int = 5) -> float:
    try:
        pred = simulate_for_fit(params, inputs, substeps)
    except ModelError:
        return math.inf
    err = pred - inputs.cgm
    if not np.all(np.isfinite(err)):
        return math.inf
    return float(np.sqrt(np.mean(err * err)))


def _params_at(base: PatientParameters, z: np.ndarray) -> PatientParameters:
    return base.replace(**{name: getattr(base, name) * math.exp(zi) for name, zi in zip(FIT_PARAMS, z)})


def fit(problem: FitProblem) -> FitResult:
    """Nelder-Mead in log space from the population point plus Latin-hypercube starts."""
    lo, hi = math.log(problem.lower), math.log(problem.upper)
    dim = len(FIT_PARAMS)
    inputs, base = problem.inputs, problem.base

    def objective(z):
        z = np.clip(z, lo, hi)
        return rmse(_params_at(base, z), inputs, problem.substeps)

    starts = [np.zeros(dim)]
    if problem.n_starts > 1:
        lhs = qmc.LatinHypercube(d=dim, seed=np.random.default_rng(problem.seed)).random(problem.n_starts - 1)
        # keep draws away from the walls so the initial simplex fits inside
        starts += list(qmc.scale(lhs, [0.8 * lo] * dim, [0.8 * hi] * dim))

    pop_rmse = objective(starts[0])
    best = None
    start_rmse = []
    total_evals = 0
    for z0 in starts:
        simplex = _initial_simplex(z0, lo, hi)
        res = minimize(objective, z0, method="Nelder-Mead", bounds=[(lo, hi)] * dim,
                       options={"initial_simplex": simplex, "xatol": problem.xatol, "fatol": math.inf,
                                "maxfev": problem.max_evals, "adaptive": False})
        total_evals += res.nfev
        start_rmse.append(float(res.fun))
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitFailure("every start failed to integrate")
    z = np.clip(best.x, lo, hi)
    best_rmse = float(best.fun)
    if not best_rmse <= pop_rmse:
        z, best_rmse = np.zeros(dim), pop_rmse
    at_bound = bool(np.any(np.isclose(z, lo, atol=1e-6)) or np.any(np.isclose(z, hi, atol=1e-6)))
    return FitResult(params=_params_at(base, z), rmse=best_rmse, iterations=total_evals,
                     converged=bool(best.success) or at_bound, bound_active=at_bound,
                     start_rmse=start_rmse, population_rmse=pop_rmse)


def _initial_simplex(z0: np.ndarray, lo: float, hi: float, step: float = 0.25) -> np.ndarray:
    dim = len(z0)
    simplex = np.tile(z0, (dim + 1, 1))
    for i in range(dim):
        # step inward if the vertex would leave the box
        s = step if z0[i] + step <= hi else -step
        simplex[i + 1, i] += s
    return simplex


def personalize(trace, base: PatientParameters, seed: int = 0, **kw) -> FitResult:
    return fit(FitProblem(FitInputs.from_trace(trace), base, seed=seed, **kw))
