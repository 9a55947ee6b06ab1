"""Successive-linearization MPC with TDI/IoB/CGM/RoC-adaptive insulin bounds.

Rates handled here are in U/h unless a name says otherwise; the model input
is mU/min and the conversion happens when the QP is assembled.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimator import EkfState
from .model import (
    N_STATE, LinearizedModel, PatientParameters, linearize, u_to_mu_per_min,
)
from .qp import QpProblem, QpResult, solve_qp

log = logging.getLogger(__name__)


class DoseKind(str, enum.Enum):
    BASAL = "basal-step"
    PRANDIAL = "prandial-bolus"
    CORRECTION = "correction-bolus"


@dataclass(frozen=True)
class DosingRecord:
    t: float
    amount: float  # U
    kind: DoseKind

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("dose amount must be non-negative")


@dataclass(frozen=True)
class TherapyProfile:
    u_basal: float  # U/h, the controller's belief (possibly biased)
    TDI_basal: float  # U/day
    CR: float  # g/U
    CF: float  # mg/dL per U
    DIA: float = 240.0  # min

    def __post_init__(self):
        for name in ("u_basal", "TDI_basal", "CR", "CF", "DIA"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def scaled_basal(self, factor: float) -> TherapyProfile:
        return TherapyProfile(self.u_basal * factor, self.TDI_basal * factor, self.CR, self.CF, self.DIA)


@dataclass(frozen=True)
class MpcConfig:
    Np: int = 12
    Nc: int = 12
    r: float = 120.0
    Q_weight: float = 1e-6
    R_weight: float = 1e-6
    N_tdi_min: float = 1.5
    N_tdi_max: float = 3.0
    N_roc_high: float = 0.7
    delta_u_min: float = -math.inf  # mU/min per step
    delta_u_max: float = math.inf
    Ts: float = 5.0
    low_glucose_floor: float = 40.0
    # IoB threshold of the TDI stage, in hours of average basal
    iob_budget_hours: float = 1.0

    def __post_init__(self):
        if not (self.Np >= self.Nc >= 1):
            raise ValueError("need Np >= Nc >= 1")
        if self.Q_weight <= 0 or self.R_weight <= 0:
            raise ValueError("weights must be positive")
        if not (self.N_tdi_max > self.N_tdi_min > 0):
            raise ValueError("need N_tdi_max > N_tdi_min > 0")
        if self.Ts <= 0:
            raise ValueError("Ts must be positive")
        if not self.delta_u_min <= 0.0 <= self.delta_u_max:
            raise ValueError("need delta_u_min <= 0 <= delta_u_max")


# --- insulin on board and glucose trend -----------------------------------

def compute_iob(history: Sequence[DosingRecord], t_now: float, profile: TherapyProfile) -> float:
    """Active insulin (U) under linear decay over ``profile.DIA``.

    Boluses count fully; basal steps count only their excess over the
    profile's nominal rate.
    """
    iob = 0.0
    for rec in reversed(history):
        age = t_now - rec.t
        if age >= profile.DIA:
            break
        if age < 0:
            continue
        if rec.kind is DoseKind.BASAL:
            # basal records carry the delivered amount over one 5-min step
            amount = rec.amount - profile.u_basal * 5.0 / 60.0
            if amount <= 0:
                continue
        else:
            amount = rec.amount
        iob += amount * (1.0 - age / profile.DIA)
    return iob


@dataclass(frozen=True)
class Trend:
    roc: float  # mg/dL/min
    cold_start: bool = False


def compute_roc(cgm_history: Sequence[tuple[float, float]], t_now: float, window: float = 15.0,
                n_points: int = 3) -> Trend:
    """Least-squares slope of the most recent ``n_points`` CGM samples in ``window`` min."""
    recent = [(t, y) for t, y in cgm_history[-n_points:] if t_now - window < t <= t_now]
    if len(recent) < 2:
        return Trend(0.0, cold_start=True)
    t = np.array([s[0] for s in recent])
    y = np.array([s[1] for s in recent])
    tc = t - t.mean()
    return Trend(float(tc @ (y - y.mean()) / (tc @ tc)))


# --- bounds -----------------------------------------------------------------

@dataclass(frozen=True)
class Bounds:
    u_min: float
    u_max: float
    suspended: bool = False
    stage: str = ""


def tdi_bounds(iob: float, profile: TherapyProfile, cfg: MpcConfig) -> tuple[float, float]:
    """IoB/TDI stage. TDI is normalized to an hourly basal-equivalent rate."""
    hourly = profile.TDI_basal / 24.0
    if iob <= cfg.N_tdi_max * hourly * cfg.iob_budget_hours:
        return 0.0, cfg.N_tdi_max * hourly
    return profile.u_basal, cfg.N_tdi_min * hourly


def adaptive_bounds(y_cgm: float, roc: float, iob: float, profile: TherapyProfile,
                    cfg: MpcConfig) -> Bounds:
    lo, hi = tdi_bounds(iob, profile, cfg)
    stage = "tdi-low-iob" if lo == 0.0 else "tdi-high-iob"
    if y_cgm <= 70.0 or (70.0 < y_cgm < 200.0 and roc <= -cfg.N_roc_high):
        # below the CGM floor suspension still applies
        return Bounds(0.0, 0.0, suspended=True, stage="suspend")
    if 70.0 < y_cgm <= 120.0:
        lo, hi = max(lo, 0.0), min(hi, profile.u_basal)
        stage += "+conservative"
    assert lo <= hi + 1e-12, f"empty insulin bounds [{lo}, {hi}]"
    return Bounds(lo, max(lo, hi), stage=stage)


# --- condensed QP -----------------------------------------------------------

@dataclass
class Prediction:
    """Affine output prediction Y = y_free + Phi @ U over the horizon (mg/dL)."""

    y_free: np.ndarray
    Phi: np.ndarray


def predict_outputs(model: LinearizedModel, x_hat: np.ndarray, cfg: MpcConfig,
                    extra_u_first: float = 0.0) -> Prediction:
    """Stack y_1..y_Np as an affine function of the Nc basal rates (U/h).

    Moves beyond Nc hold the last rate. ``extra_u_first`` is a known insulin
    rate (U/h, e.g. a bolus) added during the first interval only.
    """
    A, B, C = model.A, model.B, model.C
    scale = u_to_mu_per_min(1.0)
    b = B * scale  # per U/h
    x = np.asarray(x_hat[:N_STATE], dtype=float) - model.x_op
    y_free = np.empty(cfg.Np)
    phi = np.zeros((cfg.Np, cfg.Nc))
    sens = np.zeros((N_STATE, cfg.Nc))
    for k in range(cfg.Np):
        # free response: all moves at zero, i.e. δu = -u_op
        x = A @ x - B * model.u_op + model.w
        if k == 0:
            x = x + b * extra_u_first
        sens = A @ sens
        sens[:, min(k, cfg.Nc - 1)] += b
        y_free[k] = model.y_op + C @ x
        phi[k] = C @ sens
    return Prediction(y_free, phi)


def build_qp(model: LinearizedModel, x_hat: np.ndarray, u_prev: float, bounds: Sequence[Bounds] | Bounds,
             cfg: MpcConfig, profile: TherapyProfile, extra_u_first: float = 0.0) -> QpProblem:
    """Condensed tracking + move-suppression QP in the absolute rates U (U/h)."""
    pred = predict_outputs(model, x_hat, cfg, extra_u_first)
    q = cfg.Q_weight / profile.u_basal ** 2
    r = cfg.R_weight / profile.u_basal ** 2
    nc = cfg.Nc
    # Δu = D U - e0 u_prev
    D = np.eye(nc) - np.eye(nc, k=-1)
    e0 = np.zeros(nc)
    e0[0] = u_prev
    resid = pred.y_free - cfg.r
    H = 2.0 * (q * pred.Phi.T @ pred.Phi + r * D.T @ D)
    g = 2.0 * (q * pred.Phi.T @ resid - r * D.T @ e0)
    H = 0.5 * (H + H.T)
    if isinstance(bounds, Bounds):
        bounds = [bounds] * nc
    lb = np.array([b.u_min for b in bounds])
    ub = np.array([b.u_max for b in bounds])
    A, b = rate_rows(nc, u_prev, cfg)
    return QpProblem(H, g, lb, ub, A, b)


def rate_limits(cfg: MpcConfig) -> tuple[float, float]:
    """Δu limits converted from mU/min to U/h per step."""
    to_uh = 60.0 / 1000.0
    return cfg.delta_u_min * to_uh, cfg.delta_u_max * to_uh


def rate_rows(nc: int, u_prev: float, cfg: MpcConfig) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Rows ``A U ≤ b`` for dmin ≤ U_k − U_{k−1} ≤ dmax with U_{−1} = u_prev."""
    dmin, dmax = rate_limits(cfg)
    D = np.eye(nc) - np.eye(nc, k=-1)
    e0 = np.zeros(nc)
    e0[0] = u_prev
    rows, rhs = [], []
    if math.isfinite(dmax):
        rows.append(D)
        rhs.append(dmax + e0)
    if math.isfinite(dmin):
        rows.append(-D)
        rhs.append(-dmin - e0)
    if not rows:
        return None, None
    return np.vstack(rows), np.concatenate(rhs)


def rate_feasible_start(lb: np.ndarray, ub: np.ndarray, u_prev: float, cfg: MpcConfig) -> np.ndarray | None:
    """A point meeting both boxes and rate limits, or None when they conflict.

    Forward pass: reachable interval per step. Backward pass: pick a point in
    each interval consistent with the one after it.
    """
    dmin, dmax = rate_limits(cfg)
    n = len(lb)
    lo, hi = np.empty(n), np.empty(n)
    prev_lo = prev_hi = u_prev
    for k in range(n):
        lo[k] = max(lb[k], prev_lo + dmin)
        hi[k] = min(ub[k], prev_hi + dmax)
        if lo[k] > hi[k] + 1e-12:
            return None
        prev_lo, prev_hi = lo[k], hi[k]
    u = np.empty(n)
    u[-1] = min(max(u_prev, lo[-1]), hi[-1])
    for k in range(n - 2, -1, -1):
        a = max(lo[k], u[k + 1] - dmax)
        c = min(hi[k], u[k + 1] - dmin)
        u[k] = min(max(u_prev, a), c)
    return u


# --- closed-loop step -------------------------------------------------------

@dataclass
class StepLog:
    t: float
    cgm: float
    roc: float
    iob: float
    u_min: float
    u_max: float
    command: float  # U/h
    iterations: int
    status: str


@dataclass
class MpcController:
    params: PatientParameters
    profile: TherapyProfile
    cfg: MpcConfig = field(default_factory=MpcConfig)
    u_prev: float | None = None
    degraded: int = 0

    def __post_init__(self):
        if self.u_prev is None:
            self.u_prev = self.profile.u_basal

    def step(self, ekf: EkfState, cgm_history: Sequence[tuple[float, float]],
             dosing: list[DosingRecord], t_now: float, extra_u_first: float = 0.0) -> StepLog:
        """One receding-horizon move; appends the basal record to ``dosing``."""
        cfg, profile = self.cfg, self.profile
        y_cgm = cgm_history[-1][1]
        trend = compute_roc(cgm_history, t_now)
        iob = compute_iob(dosing, t_now, profile)
        bounds = adaptive_bounds(y_cgm, trend.roc, iob, profile, cfg)
        status = "optimal"
        iters = 0
        if bounds.u_max == bounds.u_min:
            u0 = bounds.u_min
            status = "fixed"
        else:
            try:
                model = linearize(ekf.x_hat, u_to_mu_per_min(self.u_prev), self.params, cfg.Ts)
                qp = build_qp(model, ekf.x_hat, self.u_prev, bounds, cfg, profile, extra_u_first)
                start = np.clip(np.full(cfg.Nc, self.u_prev), qp.lb, qp.ub)
                if qp.has_rows:
                    start = rate_feasible_start(qp.lb, qp.ub, self.u_prev, cfg)
                    if start is None:
                        # safety bounds win over rate limits
                        qp = QpProblem(qp.H, qp.g, qp.lb, qp.ub)
                        start = np.clip(np.full(cfg.Nc, self.u_prev), qp.lb, qp.ub)
                        status = "rate-relaxed"
                res: QpResult = solve_qp(qp, u0=start)
                iters = res.iterations
                if not res.ok or not np.all(np.isfinite(res.u)):
                    raise RuntimeError(f"QP status {res.status}")
                u0 = float(res.u[0])
            except Exception as exc:  # degraded step: hold and clamp
                log.warning("t=%.0f: MPC fallback (%s)", t_now, exc)
                self.degraded += 1
                status = "fallback"
                u0 = min(self.u_prev, bounds.u_max)
        u0 = min(max(u0, bounds.u_min), bounds.u_max)
        dosing.append(DosingRecord(t_now, u0 * cfg.Ts / 60.0, DoseKind.BASAL))
        self.u_prev = u0
        return StepLog(t_now, y_cgm, trend.roc, iob, bounds.u_min, bounds.u_max, u0, iters, status)


def mpc_step(ekf: EkfState, cgm_history, dosing_history, profile: TherapyProfile,
             cfg: MpcConfig, p: PatientParameters, u_prev: float | None = None,
             t_now: float | None = None) -> float:
    """Functional form of :meth:`MpcController.step`; returns the basal command in U/h."""
    ctl = MpcController(p, profile, cfg, u_prev=u_prev)
    t = cgm_history[-1][0] if t_now is None else t_now
    return ctl.step(ekf, cgm_history, dosing_history, t).command
