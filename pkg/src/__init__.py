"""
OPF pursuit - time-varying optimal power flow for distribution feeders.
Primal-dual DER dispatch driven by voltage measurements and a lossy dual broadcast,
with the convergence and tracking constants evaluated alongside each run.
"""

from .graph import ClosedLoopSimulator
from .state import ControllerState, FeederModel, ProblemInstance, RunResult
from .utils.scenario_loader import Scenario, ScenarioLoader

__version__ = "0.1.0"
__all__ = [
    "ClosedLoopSimulator",
    "ControllerState",
    "FeederModel",
    "ProblemInstance",
    "RunResult",
    "Scenario",
    "ScenarioLoader",
]
