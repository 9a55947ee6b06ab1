"""Hybrid automated insulin delivery: successive-linearization MPC, bolus module and a virtual cohort."""

__version__ = "0.1.0"

from .model import POPULATION, PatientParameters, find_steady_state, integrate_step, linearize  # noqa: E402
from .mpc import MpcConfig, MpcController, TherapyProfile  # noqa: E402
from .pipeline import CohortConfig, build_cohort, personalize_cohort, run_scenarios  # noqa: E402
from .simulation import SimConfig, SimulationTrace, run_scenario  # noqa: E402

__all__ = [
    "POPULATION", "PatientParameters", "find_steady_state", "integrate_step", "linearize",
    "MpcConfig", "MpcController", "TherapyProfile",
    "CohortConfig", "build_cohort", "personalize_cohort", "run_scenarios",
    "SimConfig", "SimulationTrace", "run_scenario",
]
