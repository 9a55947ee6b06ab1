"""Extended Kalman filter on the 10-state controller model, CGM as the only output."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    N_STATE, ModelError, ModelInput, PatientParameters, find_steady_state, glucose_of,
    integrate_step, linearize, output_row,
)

log = logging.getLogger(__name__)


class FilterDivergence(ModelError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    Q_proc: np.ndarray  # per-minute process-noise variances (diagonal)
    R_meas: float
    P0: np.ndarray  # diagonal
    gate_sigmas: float = 10.0
    trace_ceiling: float = 1e12
    eig_floor: float = 1e-12

    def __post_init__(self):
        if np.any(self.Q_proc < 0) or np.any(self.P0 <= 0) or self.R_meas <= 0:
            raise ValueError("EKF covariances must be positive")

    @classmethod
    def default(cls, p: PatientParameters, sensor_sd: float = 0.0,
                q_frac_per_hour: float = 0.05, p0_frac: float = 0.5,
                q_floor: float = 1e-8) -> EkfConfig:
        """Scale-aware tuning from the subject's 120 mg/dL equilibrium.

        Process noise is (5 % of each state's equilibrium magnitude per hour)²,
        stored as a per-minute variance so it scales with the prediction step.
        """
        x_eq, _ = find_steady_state(120.0, p)
        mag = np.abs(x_eq)
        q = np.maximum((q_frac_per_hour * mag) ** 2 / 60.0, q_floor)
        p0 = np.maximum((p0_frac * mag) ** 2, 1e-6)
        # gut compartments idle at equilibrium; allow a few grams of uncertainty
        p0[8:10] = np.maximum(p0[8:10], 10.0)
        r = sensor_sd ** 2 if sensor_sd > 0 else 2.0 ** 2
        return cls(Q_proc=q, R_meas=float(r), P0=p0)


@dataclass
class EkfState:
    x_hat: np.ndarray
    P: np.ndarray
    t: float = 0.0
    rejected: int = field(default=0)
    last_innovation: float = 0.0

    @classmethod
    def initial(cls, x0: np.ndarray, cfg: EkfConfig, t: float = 0.0) -> EkfState:
        return cls(x_hat=np.array(x0[:N_STATE], dtype=float), P=np.diag(cfg.P0).astype(float), t=t)


def _hygiene(P: np.ndarray, floor: float) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w, v = np.linalg.eigh(P)
    if w.min() < floor:
        w = np.maximum(w, floor)
        P = (v * w) @ v.T
        P = 0.5 * (P + P.T)
    return P


def ekf_predict(s: EkfState, inp: ModelInput, p: PatientParameters, cfg: EkfConfig,
                dt: float) -> EkfState:
    """Propagate the estimate ``dt`` minutes under a held input."""
    if dt <= 0:
        raise ModelError(f"dt must be positive, got {dt}")
    lm = linearize(s.x_hat, inp.u, p, dt)
    x_next, _ = integrate_step(s.x_hat, inp, p, dt)
    P = lm.A @ s.P @ lm.A.T + np.diag(cfg.Q_proc * dt)
    P = _hygiene(P, cfg.eig_floor)
    if not np.isfinite(np.trace(P)) or np.trace(P) > cfg.trace_ceiling:
        raise FilterDivergence(f"covariance trace {np.trace(P):.3g} exceeds ceiling")
    return replace(s, x_hat=x_next, P=P, t=s.t + dt)


def ekf_update(s: EkfState, y_cgm: float, p: PatientParameters, cfg: EkfConfig) -> EkfState:
    """Scalar CGM update, Joseph form; gated on the innovation magnitude."""
    if not np.isfinite(y_cgm) or not 20.0 <= y_cgm <= 600.0:
        raise ModelError(f"CGM value {y_cgm!r} outside [20, 600]")
    h = output_row(p)
    innov = y_cgm - glucose_of(s.x_hat, p)
    ph = s.P @ h
    var = float(h @ ph) + cfg.R_meas
    if abs(innov) > cfg.gate_sigmas * np.sqrt(var):
        log.info("t=%.0f: CGM %.1f rejected (innovation %.1f)", s.t, y_cgm, innov)
        return replace(s, rejected=s.rejected + 1, last_innovation=innov)
    k = ph / var
    x = s.x_hat + k * innov
    np.maximum(x, 0.0, out=x)
    ikh = np.eye(N_STATE) - np.outer(k, h)
    P = ikh @ s.P @ ikh.T + cfg.R_meas * np.outer(k, k)
    P = _hygiene(P, cfg.eig_floor)
    return replace(s, x_hat=x, P=P, last_innovation=innov)
