"""Hovorka glucose-insulin model: parameters, integration, equilibrium, linearization.

States are plain float arrays indexed by the constants re-exported here
(``Q1`` ... ``D2``). The controller model is 10-dimensional; the plant carries
two extra gut compartments (``R1``, ``R2``) that absorb rescue carbohydrates
with a shorter time constant.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from . import _kernels as K
from ._kernels import D1, D2, I, N_PLANT, N_STATE, Q1, Q2, R1, R2, S1, S2, X1, X2, X3

STATE_NAMES = ("Q1", "Q2", "x1", "x2", "x3", "S1", "S2", "I", "D1", "D2")
EXPM_TOL = 1e-12


class ModelError(ValueError):
    pass


class IntegrationError(ModelError):
    pass


class InfeasibleEquilibrium(ModelError):
    pass


@dataclass(frozen=True)
class PatientParameters:
    """Hovorka parameter set. Per-kg quantities are scaled by ``BW``."""

    k12: float = 0.066
    EGP0_per_kg: float = 0.0161
    k_a1: float = 0.006
    k_a2: float = 0.006
    k_a3: float = 0.03
    SI1: float = 51.2e-4
    SI2: float = 8.2e-4
    SI3: float = 520e-4
    tau_S: float = 55.0
    k_e: float = 0.138
    AG: float = 0.8
    M_wg: float = 180.16
    tau_D: float = 40.0
    V_G_per_kg: float = 0.16
    V_I_per_kg: float = 0.12
    F01_per_kg: float = 0.0097
    BW: float = 70.0
    # rescue carbs absorb with tau_D scaled by this factor (plant only)
    fast_absorption: float = 0.5

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ModelError(f"parameter {f.name} must be positive and finite, got {v!r}")
        if self.AG > 1:
            raise ModelError(f"AG must lie in (0, 1], got {self.AG}")

    @property
    def V_G(self) -> float:
        return self.V_G_per_kg * self.BW

    @property
    def V_I(self) -> float:
        return self.V_I_per_kg * self.BW

    @property
    def mgdl_per_mmol(self) -> float:
        return self.M_wg / 10.0

    @cached_property
    def theta(self) -> np.ndarray:
        th = np.empty(K.N_THETA)
        th[K.P_K12] = self.k12
        th[K.P_EGP0] = self.EGP0_per_kg * self.BW
        th[K.P_KA1] = self.k_a1
        th[K.P_KA2] = self.k_a2
        th[K.P_KA3] = self.k_a3
        th[K.P_KB1] = self.SI1 * self.k_a1
        th[K.P_KB2] = self.SI2 * self.k_a2
        th[K.P_KB3] = self.SI3 * self.k_a3
        th[K.P_TAU_S] = self.tau_S
        th[K.P_KE] = self.k_e
        th[K.P_AG] = self.AG
        th[K.P_MWG] = self.M_wg
        th[K.P_TAU_D] = self.tau_D
        th[K.P_VG] = self.V_G
        th[K.P_VI] = self.V_I
        th[K.P_F01] = self.F01_per_kg * self.BW
        th[K.P_TAU_FAST] = self.tau_D * self.fast_absorption
        th.setflags(write=False)
        return th

    def replace(self, **changes) -> PatientParameters:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


POPULATION = PatientParameters()


@dataclass(frozen=True)
class ModelInput:
    u: float = 0.0  # mU/min
    d: float = 0.0  # g/min

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.d)):
            raise ModelError(f"non-finite input u={self.u!r} d={self.d!r}")
        if self.u < 0 or self.d < 0:
            raise ModelError(f"inputs must be non-negative, got u={self.u} d={self.d}")


@dataclass
class LinearizedModel:
    """Discrete affine model δx⁺ = A δx + B δu + w around (x_op, u_op).

    ``B`` is per mU/min of insulin. ``C`` maps states to mg/dL glucose.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    w: np.ndarray
    x_op: np.ndarray
    u_op: float
    y_op: float
    Ts: float
    A_c: np.ndarray = field(repr=False, default=None)


def u_to_mu_per_min(rate_u_per_h: float) -> float:
    return rate_u_per_h * 1000.0 / 60.0


def mu_per_min_to_u_per_h(rate: float) -> float:
    return rate * 60.0 / 1000.0


def glucose_of(x: np.ndarray, p: PatientParameters) -> float:
    """Plasma glucose in mg/dL."""
    return float(x[Q1] / p.V_G * p.mgdl_per_mmol)


def mgdl_to_mmol(g: float, p: PatientParameters = POPULATION) -> float:
    return g / p.mgdl_per_mmol


def mmol_to_mgdl(g: float, p: PatientParameters = POPULATION) -> float:
    return g * p.mgdl_per_mmol


def output_row(p: PatientParameters, n: int = N_STATE) -> np.ndarray:
    c = np.zeros(n)
    c[Q1] = p.mgdl_per_mmol / p.V_G
    return c


def derivatives(x: np.ndarray, inp: ModelInput, p: PatientParameters) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        bad = [STATE_NAMES[i] if i < N_STATE else f"x[{i}]" for i in np.flatnonzero(~np.isfinite(x))]
        raise ModelError(f"non-finite state components: {', '.join(bad)}")
    out = np.empty_like(x)
    K.rhs(x, float(inp.u), float(inp.d), p.theta, out)
    return out


def integrate_step(x: np.ndarray, inp: ModelInput, p: PatientParameters, dt: float,
                   substep: float = 1.0) -> tuple[np.ndarray, int]:
    """Advance by ``dt`` minutes with RK4 under zero-order hold.

    Uses ``ceil(dt / substep)`` equal substeps. Returns the new state and the
    number of components clamped at zero.
    """
    if dt <= 0:
        raise ModelError(f"dt must be positive, got {dt}")
    n_sub = max(1, int(math.ceil(dt / substep - 1e-12)))
    y, clamped = K.rk4(np.asarray(x, dtype=float), float(inp.u), float(inp.d), p.theta, dt / n_sub, n_sub)
    if not np.all(np.isfinite(y)):
        i = int(np.flatnonzero(~np.isfinite(y))[0])
        name = STATE_NAMES[i] if i < N_STATE else f"x[{i}]"
        raise IntegrationError(f"integration produced non-finite {name}")
    return y, clamped


def find_steady_state(G_target: float, p: PatientParameters, n: int = N_STATE) -> tuple[np.ndarray, float]:
    """Equilibrium state and insulin rate (mU/min) holding glucose at ``G_target`` mg/dL.

    The insulin chain is linear in the infusion rate, so everything reduces to
    a scalar root in plasma insulin I on the Q1 balance.
    """
    if not (math.isfinite(G_target) and G_target > 0):
        raise ModelError(f"G_target must be positive, got {G_target}")
    th = p.theta
    g = G_target / p.mgdl_per_mmol
    q1 = g * p.V_G
    f01c = th[K.P_F01] if g >= 4.5 else th[K.P_F01] * g / 4.5
    fr = 0.003 * (g - 9.0) * p.V_G if g >= 9.0 else 0.0

    def balance(i_plasma: float) -> float:
        x1 = p.SI1 * i_plasma
        x2 = p.SI2 * i_plasma
        uptake = x1 * q1 * x2 / (x2 + p.k12)
        egp = max(0.0, th[K.P_EGP0] * (1.0 - p.SI3 * i_plasma))
        return -uptake - f01c - fr + egp

    if balance(0.0) <= 0.0:
        raise InfeasibleEquilibrium(
            f"no positive-insulin equilibrium at {G_target} mg/dL: "
            "glucose clearance exceeds unsuppressed EGP")
    i_hi = 1.0 / p.SI3
    i_ss = brentq(balance, 0.0, i_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)

    u_ss = i_ss * p.k_e * p.V_I
    x = np.zeros(n)
    x[Q1] = q1
    x[X1] = p.SI1 * i_ss
    x[X2] = p.SI2 * i_ss
    x[X3] = p.SI3 * i_ss
    x[Q2] = x[X1] * q1 / (x[X2] + p.k12)
    x[S1] = u_ss * p.tau_S
    x[S2] = u_ss * p.tau_S
    x[I] = i_ss
    return x, u_ss


def initial_state(G: float, p: PatientParameters) -> np.ndarray:
    """Equilibrium at ``G`` when one exists, otherwise the insulin-free state at ``G``.

    The fallback is not stationary; it only seeds an estimator that the first
    measurements will correct.
    """
    try:
        return find_steady_state(G, p)[0]
    except InfeasibleEquilibrium:
        x = np.zeros(N_STATE)
        x[Q1] = G / p.mgdl_per_mmol * p.V_G
        return x


def linearize(x_op: np.ndarray, u_op: float, p: PatientParameters, Ts: float) -> LinearizedModel:
    """Analytic Jacobians at (x_op, u_op) and exact ZOH discretization over ``Ts``."""
    x_op = np.asarray(x_op, dtype=float)[:N_STATE].copy()
    if not np.all(np.isfinite(x_op)):
        raise ModelError("linearization point is not finite")
    if Ts <= 0:
        raise ModelError(f"Ts must be positive, got {Ts}")
    a, b, w = K.discretize(x_op, float(u_op), p.theta, float(Ts), EXPM_TOL)
    c = output_row(p)
    return LinearizedModel(A=a, B=b, C=c, w=w, x_op=x_op, u_op=float(u_op),
                           y_op=float(c @ x_op), Ts=float(Ts), A_c=K.jacobian(x_op, p.theta))


def continuous_jacobians(x: np.ndarray, p: PatientParameters) -> tuple[np.ndarray, np.ndarray]:
    """(A_c, B_c) of the 10-state model; B_c is per mU/min."""
    b = np.zeros(N_STATE)
    b[S1] = 1.0
    return K.jacobian(np.asarray(x, dtype=float)[:N_STATE].copy(), p.theta), b


def meal_to_mmol(grams: float, p: PatientParameters) -> float:
    """Glucose appearing in the gut compartments for ``grams`` of CHO."""
    return 1000.0 * p.AG / p.M_wg * grams


def plant_state(x: np.ndarray) -> np.ndarray:
    """Extend a 10-state vector with empty rescue compartments."""
    out = np.zeros(N_PLANT)
    out[:N_STATE] = x[:N_STATE]
    return out


__all__ = [
    "D1", "D2", "I", "N_PLANT", "N_STATE", "Q1", "Q2", "R1", "R2", "S1", "S2", "X1", "X2", "X3",
    "STATE_NAMES", "ModelError", "IntegrationError", "InfeasibleEquilibrium", "PatientParameters",
    "POPULATION", "ModelInput", "LinearizedModel", "glucose_of", "derivatives", "integrate_step",
    "find_steady_state", "linearize", "continuous_jacobians", "u_to_mu_per_min",
    "mu_per_min_to_u_per_h", "meal_to_mmol", "plant_state", "output_row",
]
