"""Closed-loop (and open-loop training) runs of one subject through one scenario."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bolus import BolusRequest, CorrectionGate, TrendArrow, correction_bolus_terms, prandial_bolus_terms
from .estimator import EkfConfig, EkfState, ekf_predict, ekf_update
from .model import (
    D1, R1, ModelError, ModelInput, find_steady_state, glucose_of, initial_state, integrate_step, meal_to_mmol,
    plant_state, u_to_mu_per_min,
)
from .mpc import DoseKind, DosingRecord, MpcConfig, MpcController, compute_iob, compute_roc
from .scenarios import (
    STEP, STEPS_PER_DAY, CgmSensor, MealEvent, RescueRule, ScenarioSpec, VirtualSubject, generate_meals,
    run_seed, schedule_seed,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "t", "bg", "cgm", "ekf_bg", "roc", "iob", "u_min", "u_max", "basal",
    "prandial", "correction", "meal_g", "announced_g", "rescue_g", "qp_iter", "status",
)


@dataclass
class SimConfig:
    mpc: MpcConfig = field(default_factory=MpcConfig)
    sensor_sd: float = 0.0
    target: float = 120.0
    substep: float = 1.0
    ekf_q_frac: float = 0.05
    ekf_p0_frac: float = 0.5


@dataclass
class SimulationTrace:
    scenario: str
    subject: int
    seed: int
    columns: dict[str, np.ndarray]
    meals: list[MealEvent] = field(default_factory=list)
    degraded: int = 0
    clamped: int = 0
    rejected: int = 0
    meal_seed: int | None = None  # shared meal-schedule stream, closed loop only

    def __len__(self) -> int:
        return len(self.columns["t"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def days(self) -> int:
        return len(self) // STEPS_PER_DAY

    def header(self) -> str:
        return (f"# scenario={self.scenario} subject={self.subject} seed={self.seed} "
                f"meal_seed={self.meal_seed} degraded={self.degraded} clamped={self.clamped} "
                f"rejected={self.rejected}")

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        cols = [self.columns[c] for c in TRACE_COLUMNS]
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> SimulationTrace:
        lines = Path(path).read_text().splitlines()
        meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        rows = list(csv.reader(lines[1:]))
        header, body = rows[0], rows[1:]
        cols = {}
        for j, name in enumerate(header):
            vals = [r[j] for r in body]
            cols[name] = np.array(vals) if name == "status" else np.array(vals, dtype=float)
        return cls(meta["scenario"], int(meta["subject"]), int(meta["seed"]), cols,
                   degraded=int(meta.get("degraded", 0)), clamped=int(meta.get("clamped", 0)),
                   rejected=int(meta.get("rejected", 0)),
                   meal_seed=None if meta.get("meal_seed", "None") == "None" else int(meta["meal_seed"]))


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


class _Recorder:
    def __init__(self, n: int):
        self.data = {c: np.zeros(n) for c in TRACE_COLUMNS if c != "status"}
        self.data["status"] = np.empty(n, dtype=object)

    def set(self, k: int, **values):
        for name, v in values.items():
            self.data[name][k] = v

    def columns(self) -> dict[str, np.ndarray]:
        out = dict(self.data)
        out["status"] = out["status"].astype(str)
        return out


def _initial_plant(spec: ScenarioSpec, subject: VirtualSubject, target: float) -> np.ndarray:
    g0 = target if spec.initial_glucose is None else spec.initial_glucose
    x, _ = find_steady_state(g0, subject.plant_params)
    return plant_state(x)


def run_scenario(spec: ScenarioSpec, subject: VirtualSubject, seed: int, cfg: SimConfig | None = None,
                 meals: list[MealEvent] | None = None) -> SimulationTrace:
    """Simulate ``spec.days`` days on the 5-min grid.

    Per step: sense → rescue check → EKF predict/update → announcements and
    prandial bolus → correction gate → MPC move → plant integration.
    """
    cfg = cfg or SimConfig()
    if spec.open_loop:
        return run_open_loop(spec, subject, seed, cfg, meals)
    rng_meals = np.random.default_rng([seed, 0])
    rng_cgm = np.random.default_rng([seed, 1])
    meal_seed = schedule_seed(subject.seed, subject.index)
    if meals is None:
        meals = generate_meals(spec, rng_meals, np.random.default_rng(meal_seed))
    plant_p, ctl_p = subject.plant_params, subject.controller_params
    n = spec.n_steps
    rec = _Recorder(n)

    sensor = CgmSensor(sigma=cfg.sensor_sd, rng=rng_cgm)
    rescue = RescueRule(enabled=spec.rescue)
    gate = CorrectionGate()
    ekf_cfg = EkfConfig.default(ctl_p, cfg.sensor_sd, cfg.ekf_q_frac, cfg.ekf_p0_frac)
    base_profile = subject.profile

    x = _initial_plant(spec, subject, cfg.target)
    bg0 = glucose_of(x, plant_p)
    cgm0 = sensor.sense(bg0)
    sensor_first = cgm0
    x_ctl = initial_state(min(max(cgm0, 40.0), 400.0), ctl_p)
    ekf = EkfState.initial(x_ctl, ekf_cfg)
    ctl = MpcController(ctl_p, base_profile.scaled_basal(spec.bias_on_day(0)), cfg.mpc)

    true_at = _bucket(meals, "t_true")
    ann_at = _bucket(meals, "t_announced")
    cgm_hist: list[tuple[float, float]] = []
    dosing: list[DosingRecord] = []
    u_applied = 0.0  # mU/min over the previous interval
    rescues: list[MealEvent] = []
    clamped = 0
    degraded = 0

    for k in range(n):
        t = k * STEP
        profile = base_profile.scaled_basal(spec.bias_on_day(int(t // 1440)))
        ctl.profile = profile
        bg = glucose_of(x, plant_p)
        cgm = sensor_first if k == 0 else sensor.sense(bg)
        cgm_hist.append((t, cgm))

        rescue_g = 0.0
        ev = rescue.check(t, bg)
        if ev is not None:
            rescues.append(ev)
            x[R1] += meal_to_mmol(ev.grams_true, plant_p)
            rescue_g = ev.grams_true
        meal_g = 0.0
        for m in true_at.get(k, ()):
            x[D1] += meal_to_mmol(m.grams_true, plant_p)
            meal_g += m.grams_true

        try:
            if k > 0:
                ekf = ekf_predict(ekf, ModelInput(u_applied), ctl_p, ekf_cfg, STEP)
            ekf = ekf_update(ekf, cgm, ctl_p, ekf_cfg)
        except ModelError as exc:
            log.warning("t=%.0f: estimator degraded (%s)", t, exc)
            degraded += 1
            ekf = EkfState.initial(find_steady_state(min(max(cgm, 40.0), 400.0), ctl_p)[0], ekf_cfg, t)

        trend = compute_roc(cgm_hist, t)
        arrow = TrendArrow.from_roc(trend.roc)
        prandial = 0.0
        announced = 0.0
        for m in ann_at.get(k, ()):
            announced += m.grams_announced
            ekf.x_hat[D1] += meal_to_mmol(m.grams_announced, ctl_p)
            gate.meal_announced(t)
        if announced > 0:
            iob = compute_iob(dosing, t, profile)
            terms = prandial_bolus_terms(BolusRequest(t, announced, _clip_g(cgm), arrow, profile, iob, cfg.target))
            if terms.raw < 0:
                log.debug("t=%.0f: negative prandial bolus %.3f U floored", t, terms.raw)
            prandial = terms.amount
            if prandial > 0:
                dosing.append(DosingRecord(t, prandial, DoseKind.PRANDIAL))
        correction = 0.0
        iob = compute_iob(dosing, t, profile)
        terms = correction_bolus_terms(cgm, arrow, profile, iob, gate, t, cfg.target)
        if terms is not None and terms.amount > 0:
            correction = terms.amount
            dosing.append(DosingRecord(t, correction, DoseKind.CORRECTION))

        bolus_rate = (prandial + correction) * 60.0 / STEP  # U/h over this interval
        step = ctl.step(ekf, cgm_hist, dosing, t, extra_u_first=bolus_rate)

        u_applied = u_to_mu_per_min(step.command + bolus_rate)
        try:
            x, c = integrate_step(x, ModelInput(u_applied), plant_p, STEP, cfg.substep)
        except ModelError:
            raise
        clamped += c

        rec.set(k, t=t, bg=bg, cgm=cgm, ekf_bg=glucose_of(ekf.x_hat, ctl_p), roc=trend.roc, iob=step.iob,
                u_min=step.u_min, u_max=step.u_max, basal=step.command, prandial=prandial,
                correction=correction, meal_g=meal_g, announced_g=announced, rescue_g=rescue_g,
                qp_iter=step.iterations, status=step.status)

    return SimulationTrace(spec.id, subject.index, seed, rec.columns(), list(meals) + rescues,
                           degraded=degraded + ctl.degraded, clamped=clamped, rejected=ekf.rejected,
                           meal_seed=meal_seed)


def run_open_loop(spec: ScenarioSpec, subject: VirtualSubject, seed: int, cfg: SimConfig | None = None,
                  meals: list[MealEvent] | None = None) -> SimulationTrace:
    """Fixed nominal basal with calculator meal boluses; used to collect training data."""
    cfg = cfg or SimConfig()
    rng_meals = np.random.default_rng([seed, 0])
    rng_cgm = np.random.default_rng([seed, 1])
    if meals is None:
        meals = generate_meals(spec, rng_meals)
    plant_p = subject.plant_params
    n = spec.n_steps
    rec = _Recorder(n)
    sensor = CgmSensor(sigma=cfg.sensor_sd, rng=rng_cgm)
    rescue = RescueRule(enabled=spec.rescue)
    x = _initial_plant(spec, subject, cfg.target)
    true_at = _bucket(meals, "t_true")
    ann_at = _bucket(meals, "t_announced")
    cgm_hist: list[tuple[float, float]] = []
    dosing: list[DosingRecord] = []
    rescues = []
    clamped = 0
    for k in range(n):
        t = k * STEP
        profile = subject.profile.scaled_basal(spec.bias_on_day(int(t // 1440)))
        bg = glucose_of(x, plant_p)
        cgm = sensor.sense(bg)
        cgm_hist.append((t, cgm))
        rescue_g = 0.0
        ev = rescue.check(t, bg)
        if ev is not None:
            rescues.append(ev)
            x[R1] += meal_to_mmol(ev.grams_true, plant_p)
            rescue_g = ev.grams_true
        meal_g = 0.0
        for m in true_at.get(k, ()):
            x[D1] += meal_to_mmol(m.grams_true, plant_p)
            meal_g += m.grams_true
        trend = compute_roc(cgm_hist, t)
        arrow = TrendArrow.from_roc(trend.roc)
        announced = sum(m.grams_announced for m in ann_at.get(k, ()))
        prandial = 0.0
        iob = compute_iob(dosing, t, profile)
        if announced > 0:
            prandial = prandial_bolus_terms(
                BolusRequest(t, announced, _clip_g(cgm), arrow, profile, iob, cfg.target)).amount
            if prandial > 0:
                dosing.append(DosingRecord(t, prandial, DoseKind.PRANDIAL))
        basal = profile.u_basal
        dosing.append(DosingRecord(t, basal * STEP / 60.0, DoseKind.BASAL))
        u = u_to_mu_per_min(basal + prandial * 60.0 / STEP)
        x, c = integrate_step(x, ModelInput(u), plant_p, STEP, cfg.substep)
        clamped += c
        rec.set(k, t=t, bg=bg, cgm=cgm, ekf_bg=np.nan, roc=trend.roc, iob=iob, u_min=basal, u_max=basal,
                basal=basal, prandial=prandial, correction=0.0, meal_g=meal_g, announced_g=announced,
                rescue_g=rescue_g, qp_iter=0, status="open-loop")
    return SimulationTrace(spec.id, subject.index, seed, rec.columns(), list(meals) + rescues, clamped=clamped)


def _bucket(meals, attr: str) -> dict[int, list[MealEvent]]:
    out: dict[int, list[MealEvent]] = {}
    for m in meals:
        out.setdefault(int(round(getattr(m, attr) / STEP)), []).append(m)
    return out


def _clip_g(g: float) -> float:
    return min(max(g, 20.0), 600.0)


def simulate_subject(spec: ScenarioSpec, subject: VirtualSubject, cohort_seed: int,
                     cfg: SimConfig | None = None) -> SimulationTrace:
    return run_scenario(spec, subject, run_seed(cohort_seed, subject.index, spec.id), cfg)
