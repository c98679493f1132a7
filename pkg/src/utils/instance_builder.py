"""
Builds the per-step problem instances of a scenario.
"""

from typing import List, Optional

from src.state import (
    CapabilitySet,
    CostModel,
    FeederModel,
    LinearModel,
    ProblemInstance,
    RegularizationParams,
    ScenarioTimeline,
)
from src.tools.network_tools import NetworkModeler


class InstanceBuilder:
    """Turns the timeline of loads and irradiance into one ProblemInstance per global step."""

    def __init__(
        self,
        feeder: FeederModel,
        linear: LinearModel,
        timeline: ScenarioTimeline,
        cost: CostModel,
        params: RegularizationParams,
        v_min: float = 0.95,
        v_max: float = 1.05,
    ):
        self.feeder = feeder
        self.linear = linear
        self.timeline = timeline
        self.cost = cost
        self.params = params
        self.v_min = v_min
        self.v_max = v_max
        self._der_rows = [node - 1 for node in linear.der_nodes]

    def build(self, k: int, params: Optional[RegularizationParams] = None) -> ProblemInstance:
        """
        Instance of global step ``k``.

        Args:
            k: Global step, 0 <= k < horizon
            params: Optional replacement for the scenario's regularization parameters

        Returns:
            ProblemInstance with offsets from the step's non-DER loads
        """
        load_p = self.timeline.load_p[k]
        load_q = self.timeline.load_q[k]
        return ProblemInstance(
            k=k,
            r_check=self.linear.r_check,
            b_check=self.linear.b_check,
            c=NetworkModeler.constraint_offsets(self.linear, (load_p, load_q)),
            der_load_p=load_p[self._der_rows],
            der_load_q=load_q[self._der_rows],
            v_min=self.v_min,
            v_max=self.v_max,
            capability=CapabilitySet(
                p_min=self.feeder.p_min,
                p_av=self.timeline.p_available[k],
                rating=self.feeder.ratings,
            ),
            cost=self.cost,
            params=params or self.params,
        )

    def build_all(self, params: Optional[RegularizationParams] = None) -> List[ProblemInstance]:
        return [self.build(k, params) for k in range(self.timeline.horizon)]
