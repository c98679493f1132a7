"""
Plant-side graph nodes: the feeder answering the applied setpoints, and the voltage
sensors feeding the aggregator and the DERs.
"""

import logging
from typing import Any, Dict, Literal, Sequence

import numpy as np

from src.exceptions import PowerFlowDivergedError
from src.state import AdmittanceModel, LinearModel, LoopState, ScenarioTimeline
from src.tools.opf_tools import linear_magnitudes
from src.tools.powerflow_tools import LinearPlant, ZBusPowerFlow, assemble_injections, measure_voltages

logger = logging.getLogger(__name__)


class GridPlant:
    """Applies the controller's current setpoints together with this tick's loads."""

    def __init__(
        self,
        admittance: AdmittanceModel,
        linear: LinearModel,
        timeline: ScenarioTimeline,
        v0: complex,
        kind: Literal["nonlinear", "linear"] = "nonlinear",
        tol: float = 1e-8,
        max_iter: int = 100,
    ):
        self.kind = kind
        self.timeline = timeline
        self.der_nodes = linear.der_nodes
        self.n_nodes = linear.n_nodes
        self.tol = tol
        self.max_iter = max_iter
        self.flow = ZBusPowerFlow(admittance, v0) if kind == "nonlinear" else None
        self.linear = LinearPlant(linear) if kind == "linear" else None

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        k = state["global_step"]
        u = state["controller"].u
        injections = assemble_injections(
            self.n_nodes, self.der_nodes, u, self.timeline.load_p[k], self.timeline.load_q[k]
        )
        if self.linear is not None:
            solution = self.linear.solve(injections, state["instance"], u)
        else:
            try:
                solution = self.flow.solve(injections, tol=self.tol, max_iter=self.max_iter)
            except PowerFlowDivergedError as e:
                logger.error(f"Power flow diverged at tick {state['tick']} (residual {e.residual:.3e})")
                raise e.at_tick(state["tick"]) from e
        return {"solution": solution}


class VoltageSensors:
    """
    Samples voltage magnitudes on the monitored set and at the DER nodes.
    A node in both sets yields one reading shared by the aggregator and the DER.
    """

    def __init__(self, monitored: Sequence[int], der_nodes: Sequence[int], noise_bound: float = 0.0, seed: int = 0):
        self.monitored = list(monitored)
        extra = [node for node in der_nodes if node not in self.monitored]
        self.nodes = self.monitored + extra
        self.der_positions = np.array([self.nodes.index(node) for node in der_nodes], dtype=int)
        self.noise_bound = noise_bound
        self.seed = seed

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        solution = state["solution"]
        readings = measure_voltages(solution, self.nodes, self.noise_bound, seed=[self.seed, state["tick"]])
        monitored = readings[: len(self.monitored)]

        rows = np.asarray(self.monitored, dtype=int) - 1
        predicted = linear_magnitudes(state["instance"], state["controller"].u)
        mismatch = float(np.linalg.norm(solution.magnitudes[rows] - predicted))
        return {
            "monitored_measurements": monitored,
            "der_measurements": readings[self.der_positions],
            "mismatch": mismatch,
        }
