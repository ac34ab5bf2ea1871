"""Fleet simulation, exposure arithmetic and bounded state-space exploration."""

from rtgov.simulator.analytics import esw_bound, flagged_actions, legacy_exposure
from rtgov.simulator.engine import ConvergenceReport, RunMetrics, RunResult, converge_check, run
from rtgov.simulator.scenario import Scenario, ScenarioError, build_scenario, load_scenario

__all__ = [
    "ConvergenceReport",
    "RunMetrics",
    "RunResult",
    "Scenario",
    "ScenarioError",
    "build_scenario",
    "converge_check",
    "esw_bound",
    "flagged_actions",
    "legacy_exposure",
    "load_scenario",
    "run",
]
