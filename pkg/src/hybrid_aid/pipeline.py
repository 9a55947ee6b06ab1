"""Cohort orchestration: training run, personalization, scenario fan-out."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable

from .personalization import FitResult, personalize
from .scenarios import STANDARD_SCENARIOS, ScenarioSpec, VirtualSubject, generate_cohort, run_seed
from .simulation import SimConfig, SimulationTrace, run_scenario

log = logging.getLogger(__name__)


@dataclass
class CohortConfig:
    n: int = 10
    seed: int = 1
    cv: float = 0.15
    bw_range: tuple[float, float] = (55.0, 95.0)
    basal_share: float = 0.4
    fit_starts: int = 5
    fit_max_evals: int = 2000
    sim: SimConfig = field(default_factory=SimConfig)
    scenarios: dict[str, ScenarioSpec] = field(default_factory=lambda: dict(STANDARD_SCENARIOS))


def build_cohort(cfg: CohortConfig) -> list[VirtualSubject]:
    return generate_cohort(cfg.n, cfg.seed, cfg.cv, cfg.bw_range, basal_share=cfg.basal_share)


def personalize_subject(subject: VirtualSubject, cfg: CohortConfig) -> tuple[VirtualSubject, SimulationTrace]:
    """Collect the training trace and fit the controller model on it."""
    spec = cfg.scenarios["TRAIN"]
    seed = run_seed(cfg.seed, subject.index, "TRAIN")
    trace = run_scenario(spec, subject, seed, cfg.sim)
    res: FitResult = personalize(trace, subject.controller_params, seed=seed,
                                 n_starts=cfg.fit_starts, max_evals=cfg.fit_max_evals)
    log.info("subject %d fitted: rmse %.2f (population %.2f)", subject.index, res.rmse, res.population_rmse)
    return subject.with_controller(res.params, res), trace


def run_one(subject: VirtualSubject, scenario_id: str, cfg: CohortConfig) -> SimulationTrace:
    spec = cfg.scenarios[scenario_id]
    return run_scenario(spec, subject, run_seed(cfg.seed, subject.index, scenario_id), cfg.sim)


def _personalize_task(args):
    subject, cfg = args
    return personalize_subject(subject, cfg)


def _run_task(args):
    subject, sid, cfg = args
    return run_one(subject, sid, cfg)


def _map(fn, items: list, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def personalize_cohort(subjects: list[VirtualSubject], cfg: CohortConfig, workers: int = 1
                       ) -> tuple[list[VirtualSubject], list[SimulationTrace]]:
    out = _map(_personalize_task, [(s, cfg) for s in subjects], workers)
    return [o[0] for o in out], [o[1] for o in out]


def run_scenarios(subjects: list[VirtualSubject], scenario_ids: Iterable[str], cfg: CohortConfig,
                  workers: int = 1) -> dict[tuple[int, str], SimulationTrace]:
    """Independent (subject, scenario) runs; results keyed and ordered by (subject, scenario)."""
    keys = [(s, sid) for s in subjects for sid in scenario_ids]
    traces = _map(_run_task, [(s, sid, cfg) for s, sid in keys], workers)
    return {(s.index, sid): tr for (s, sid), tr in zip(keys, traces)}


def with_profile_share(subject: VirtualSubject, share: float) -> VirtualSubject:
    from .scenarios import therapy_profile
    return replace(subject, profile=therapy_profile(subject.plant_params, basal_share=share))
