"""Scenario definitions, virtual cohort, meal/announcement processes, CGM and rescue."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import truncnorm

from .model import POPULATION, InfeasibleEquilibrium, PatientParameters, find_steady_state, mu_per_min_to_u_per_h
from .mpc import TherapyProfile

log = logging.getLogger(__name__)

STEP = 5.0
STEPS_PER_DAY = 288
DAY = 1440.0

SCENARIO_IDS = ("S0", "S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9", "TRAIN")
_SCENARIO_CODE = {sid: i for i, sid in enumerate(SCENARIO_IDS[:-1])} | {"TRAIN": 100}

# carb-counting error models: multiplicative factor on the true grams
CC_MODELS = ("none", "over", "under", "random", "random_over", "random_under", "normal")


@dataclass(frozen=True)
class MealWindow:
    slot: str
    start: float  # minute of day
    end: float
    g_min: float
    g_max: float


MEAL_WINDOWS = (
    MealWindow("breakfast", 7 * 60, 8.5 * 60, 15, 50),
    MealWindow("lunch", 12 * 60, 13.5 * 60, 50, 90),
    MealWindow("dinner", 19 * 60, 20.5 * 60, 30, 70),
)


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    days: int
    basal_bias: tuple[float, ...] = (1.0,)
    cc_error: tuple[str, ...] = ("none",)
    announce_delay: tuple[float, float] | None = None
    initial_glucose: float | None = None  # None: equilibrium at the target
    rescue: bool = True
    open_loop: bool = False
    cc_magnitude: float = 0.25
    cc_normal_clip: float = 0.5

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if any(b <= 0 for b in self.basal_bias):
            raise ValueError("basal multipliers must be positive")
        if len(self.basal_bias) not in (1, self.days):
            raise ValueError(f"basal_bias needs 1 or {self.days} entries")
        if len(self.cc_error) not in (1, self.days):
            raise ValueError(f"cc_error needs 1 or {self.days} entries")
        for m in self.cc_error:
            if m not in CC_MODELS:
                raise ValueError(f"unknown cc_error model {m!r}")
        if self.announce_delay is not None:
            a, b = self.announce_delay
            if not 0 <= a <= b:
                raise ValueError("announce_delay needs 0 <= a <= b")

    def bias_on_day(self, day: int) -> float:
        return self.basal_bias[0] if len(self.basal_bias) == 1 else self.basal_bias[day]

    def cc_on_day(self, day: int) -> str:
        return self.cc_error[0] if len(self.cc_error) == 1 else self.cc_error[day]

    @property
    def n_steps(self) -> int:
        return self.days * STEPS_PER_DAY


_DELAY = (0.0, 30.0)
_PIECEWISE_BASAL = (1.0, 1.25, 1.0, 0.75, 1.0)
_PIECEWISE_CC = ("random", "over", "random", "under", "random")

STANDARD_SCENARIOS: dict[str, ScenarioSpec] = {
    "TRAIN": ScenarioSpec("TRAIN", 7, cc_error=("normal",), open_loop=True),
    "S0": ScenarioSpec("S0", 5),
    "S1": ScenarioSpec("S1", 5, basal_bias=(1.25,), announce_delay=_DELAY),
    "S2": ScenarioSpec("S2", 5, basal_bias=(0.75,), announce_delay=_DELAY),
    "S3": ScenarioSpec("S3", 5, cc_error=("random_over",), announce_delay=_DELAY),
    "S4": ScenarioSpec("S4", 5, cc_error=("random_under",), announce_delay=_DELAY),
    "S5": ScenarioSpec("S5", 5, basal_bias=_PIECEWISE_BASAL, announce_delay=_DELAY),
    "S6": ScenarioSpec("S6", 5, cc_error=_PIECEWISE_CC, announce_delay=_DELAY),
    "S7": ScenarioSpec("S7", 5, basal_bias=_PIECEWISE_BASAL, cc_error=_PIECEWISE_CC, announce_delay=_DELAY),
    "S8": ScenarioSpec("S8", 1, initial_glucose=60.0, announce_delay=_DELAY),
    "S9": ScenarioSpec("S9", 1, initial_glucose=250.0, announce_delay=_DELAY),
}


def parse_scenario_ids(text: str) -> list[str]:
    """Parse ``S0,S3`` / ``S1..S9`` / ``all`` (the dash in ``S-1`` is optional)."""
    out: list[str] = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        part = part.upper().replace("S-", "S")
        if part == "ALL":
            out.extend(SCENARIO_IDS[:-1])
        elif ".." in part:
            a, b = part.split("..")
            ia, ib = SCENARIO_IDS.index(a), SCENARIO_IDS.index(b)
            if ib < ia or "TRAIN" in (a, b):
                raise ValueError(f"bad scenario range {part!r}")
            out.extend(SCENARIO_IDS[ia:ib + 1])
        elif part in SCENARIO_IDS:
            out.append(part)
        else:
            raise ValueError(f"unknown scenario id {part!r}")
    seen = set()
    return [s for s in out if not (s in seen or seen.add(s))]


def run_seed(cohort_seed: int, subject: int, scenario_id: str) -> int:
    """The single named seed of one (subject, scenario) run."""
    ss = np.random.SeedSequence([int(cohort_seed), int(subject), _SCENARIO_CODE[scenario_id]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def schedule_seed(cohort_seed: int, subject: int) -> int:
    """Seed of a subject's meal schedule, shared by all closed-loop scenarios."""
    ss = np.random.SeedSequence([int(cohort_seed), int(subject), 200])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# --- meals ------------------------------------------------------------------

@dataclass(frozen=True)
class MealEvent:
    t_true: float
    grams_true: float
    t_announced: float
    grams_announced: float
    meal_slot: str

    def __post_init__(self):
        if self.t_announced < self.t_true:
            raise ValueError("announcement cannot precede the meal")
        if self.grams_true < 0 or self.grams_announced < 0:
            raise ValueError("meal grams must be non-negative")


def _snap(t: float) -> float:
    return STEP * round(t / STEP)


def cc_factor(model: str, rng: np.random.Generator, magnitude: float = 0.25, clip: float = 0.5) -> float:
    if model == "none":
        return 1.0
    if model == "over":
        return 1.0 + magnitude
    if model == "under":
        return 1.0 - magnitude
    if model == "random":
        return float(rng.uniform(1.0 - magnitude, 1.0 + magnitude))
    if model == "random_over":
        return float(rng.uniform(1.0, 1.0 + magnitude))
    if model == "random_under":
        return float(rng.uniform(1.0 - magnitude, 1.0))
    if model == "normal":
        return 1.0 + float(truncnorm.rvs(-clip / magnitude, clip / magnitude, scale=magnitude, random_state=rng))
    raise ValueError(f"unknown cc_error model {model!r}")


def generate_meals(spec: ScenarioSpec, rng: np.random.Generator,
                   schedule_rng: np.random.Generator | None = None) -> list[MealEvent]:
    """Three meals per day on the 5-min grid, with announcement delay and CC error.

    When ``schedule_rng`` is given, meal times and true grams come from it and
    only the announcement perturbations come from ``rng``; scenarios sharing a
    schedule stream then differ only in the perturbation under test.
    """
    sched = rng if schedule_rng is None else schedule_rng
    meals = []
    for day in range(spec.days):
        for w in MEAL_WINDOWS:
            t = _snap(day * DAY + sched.uniform(w.start, w.end))
            mu, sd = 0.5 * (w.g_min + w.g_max), (w.g_max - w.g_min) / 4.0
            grams = float(truncnorm.rvs((w.g_min - mu) / sd, (w.g_max - mu) / sd, loc=mu, scale=sd,
                                        random_state=sched))
            delay = 0.0
            if spec.announce_delay is not None:
                delay = _snap(rng.uniform(*spec.announce_delay))
            factor = cc_factor(spec.cc_on_day(day), rng, spec.cc_magnitude, spec.cc_normal_clip)
            meals.append(MealEvent(t, grams, t + delay, grams * factor, w.slot))
    return meals


# --- cohort -----------------------------------------------------------------

PERTURBED = ("k12", "EGP0_per_kg", "SI1", "SI2", "SI3", "tau_S", "tau_D", "k_e", "V_G_per_kg")


@dataclass
class VirtualSubject:
    index: int
    plant_params: PatientParameters
    controller_params: PatientParameters
    profile: TherapyProfile
    seed: int
    fit: object | None = field(default=None, repr=False)

    def with_controller(self, params: PatientParameters, fit=None) -> VirtualSubject:
        return replace(self, controller_params=params, fit=fit)


def therapy_profile(p: PatientParameters, target: float = 120.0, basal_share: float = 0.4,
                    dia: float = 240.0) -> TherapyProfile:
    """Nominal basal from the plant equilibrium; CR/CF by the 500/1800 rules."""
    _, u_ss = find_steady_state(target, p)
    u_basal = mu_per_min_to_u_per_h(u_ss)
    tdi_basal = 24.0 * u_basal
    tdi = tdi_basal / basal_share
    return TherapyProfile(u_basal=u_basal, TDI_basal=tdi_basal, CR=500.0 / tdi, CF=1800.0 / tdi, DIA=dia)


def generate_cohort(n: int, seed: int, cv: float = 0.15, bw_range: tuple[float, float] = (55.0, 95.0),
                    population: PatientParameters = POPULATION, max_retries: int = 50,
                    basal_share: float = 0.4) -> list[VirtualSubject]:
    """Log-normal draws (median at the population value) of the perturbed parameters."""
    if n < 1:
        raise ValueError("cohort size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    sigma = math.sqrt(math.log1p(cv * cv))
    subjects = []
    for i in range(n):
        for attempt in range(max_retries):
            bw = float(rng.uniform(*bw_range))
            z = rng.standard_normal(len(PERTURBED))
            changes = {name: getattr(population, name) * math.exp(sigma * zi) for name, zi in zip(PERTURBED, z)}
            plant = population.replace(BW=bw, **changes)
            try:
                profile = therapy_profile(plant, basal_share=basal_share)
                find_steady_state(60.0, plant)
                find_steady_state(250.0, plant)
            except InfeasibleEquilibrium:
                log.info("subject %d draw %d infeasible, redrawing", i, attempt)
                continue
            break
        else:
            raise InfeasibleEquilibrium(f"subject {i}: no feasible draw in {max_retries} tries")
        subjects.append(VirtualSubject(
            index=i, plant_params=plant, controller_params=population.replace(BW=bw),
            profile=profile, seed=int(seed)))
    return subjects


# --- sensing and rescue -----------------------------------------------------

@dataclass
class CgmSensor:
    sigma: float = 0.0
    phi: float = 0.7
    lo: float = 40.0
    hi: float = 400.0
    rng: np.random.Generator | None = None
    _e: float = 0.0

    def sense(self, plant_bg: float) -> float:
        if self.sigma > 0:
            self._e = self.phi * self._e + self.sigma * float(self.rng.standard_normal())
        return min(max(plant_bg + self._e, self.lo), self.hi)


def sense_cgm(plant_bg: float, sensor: CgmSensor) -> float:
    return sensor.sense(plant_bg)


@dataclass
class RescueRule:
    """15 g of fast carbs whenever BG < 70 mg/dL, at most every 15 min."""

    enabled: bool = True
    threshold: float = 70.0
    interval: float = 15.0
    grams: float = 15.0
    last: float = -math.inf

    def check(self, t: float, plant_bg: float) -> MealEvent | None:
        if not self.enabled or plant_bg >= self.threshold or t - self.last < self.interval:
            return None
        self.last = t
        return MealEvent(t, self.grams, t, 0.0, "rescue")


def apply_rescue(rule: RescueRule, t: float, plant_bg: float) -> MealEvent | None:
    return rule.check(t, plant_bg)


def scenario_from_overrides(base: ScenarioSpec, overrides: dict) -> ScenarioSpec:
    return replace(base, **overrides)


def days_of(meals: Sequence[MealEvent]) -> int:
    return 0 if not meals else int(max(m.t_true for m in meals) // DAY) + 1
