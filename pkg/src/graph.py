"""
Closed-loop simulator.
Each controller tick runs through a compiled LangGraph: plant -> sensors -> (channel) ->
(oracle) -> controller -> recorder. Conditional edges route around the channel for
policies without a broadcast and around the oracle when analysis is off.
"""

import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from langgraph.graph import END, START, StateGraph

from src.nodes.analyst import OracleNode, RunRecorder
from src.nodes.channel import BroadcastChannel
from src.nodes.controllers import DispatchController, FastLocalFeedback, VoltVarDroop
from src.nodes.plant import GridPlant, VoltageSensors
from src.state import BoundsReport, LoopState, PolicyName, RunResult, SaddlePoint, StepRecord
from src.tools.bounds_tools import BoundsAnalyzer, TrajectoryAnalyzer
from src.tools.opf_tools import SaddlePointOracle
from src.utils.report_writer import ReportWriter
from src.utils.scenario_loader import Scenario, ScenarioLoader

logger = logging.getLogger(__name__)

BROADCAST_POLICIES = ("feedback", "feedback-fast")
TRACKING_POLICIES = ("synchronous", "feedback", "feedback-fast")


class ClosedLoopSimulator:
    """Runs dispatch policies against one scenario and analyses the trajectories."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.settings = scenario.settings
        self.instances = scenario.instances()
        analysis = self.settings.analysis
        self.oracle = SaddlePointOracle(tol=analysis.oracle_tol, max_iter=analysis.oracle_max_iter)
        self._oracle_cache: Dict[int, SaddlePoint] = {}
        self.writer = ReportWriter(scenario.feeder, scenario.monitored)

    # ------------------------------------------------------------------
    # Graph
    # ------------------------------------------------------------------

    def _build_graph(self, nodes: Dict[str, Callable], broadcast: bool, analysis: bool):
        """Compile the per-tick graph for one run."""
        builder = StateGraph(LoopState)
        for name, node in nodes.items():
            builder.add_node(name, node)

        def after_sensors(state: LoopState) -> str:
            if broadcast and state["is_global"]:
                return "broadcast"
            return after_channel(state)

        def after_channel(state: LoopState) -> str:
            return "solve" if analysis and state["is_global"] else "control"

        builder.add_edge(START, "plant")
        builder.add_edge("plant", "sensors")
        builder.add_conditional_edges(
            "sensors", after_sensors, {"broadcast": "channel", "solve": "oracle", "control": "controller"}
        )
        builder.add_conditional_edges("channel", after_channel, {"solve": "oracle", "control": "controller"})
        builder.add_edge("oracle", "controller")
        builder.add_edge("controller", "recorder")
        builder.add_edge("recorder", END)
        return builder.compile()

    def _staleness_limit(self, policy: PolicyName, caps: np.ndarray, ratio: int) -> np.ndarray:
        if policy == "feedback":
            return caps
        if policy == "feedback-fast":
            return (caps + 1) * ratio - 1
        return np.zeros_like(caps)

    # ------------------------------------------------------------------
    # Runs
    # ------------------------------------------------------------------

    def run(
        self,
        policy: Optional[PolicyName] = None,
        p_loss: Optional[float] = None,
        channel_seed: Optional[int] = None,
        analysis: Optional[bool] = None,
    ) -> RunResult:
        """
        Simulate the closed loop over the scenario horizon.

        Args:
            policy: Dispatch policy; defaults to the scenario's
            p_loss: Uniform loss probability replacing the scenario's
            channel_seed: Channel seed replacing the scenario's
            analysis: Solve the oracle and evaluate tracking; defaults to the scenario's

        Returns:
            RunResult with records, plant solutions, bounds and metrics

        Raises:
            PowerFlowDivergedError: plant failed at some tick (the tick is in the error)
            BoundViolationError: a runtime bound check failed with enforcement on
        """
        scenario = self.scenario
        settings = self.settings
        policy = policy or settings.controller.policy
        analysis = settings.analysis.enabled if analysis is None else analysis
        ratio = scenario.timeline.fast_ratio if policy == "feedback-fast" else 1
        channel = ScenarioLoader.channel_model(settings, len(scenario.der_nodes), p_loss, channel_seed)
        caps = np.asarray(channel.staleness_cap)

        baseline = None
        if policy == "feedback":
            baseline = BoundsAnalyzer.compute_constants(self.instances, caps)
        recorder = RunRecorder(
            policy,
            self._staleness_limit(policy, caps, ratio),
            baseline=baseline,
            staleness_caps=caps,
            noise_bound=settings.sensors.noise_bound,
            d_gamma=scenario.params.d_gamma,
            d_mu=scenario.params.d_mu,
            enforce=settings.analysis.enforce_bounds,
        )
        controller = DispatchController(
            policy,
            fast=FastLocalFeedback(scenario.monitored, scenario.der_nodes) if policy == "feedback-fast" else None,
            droop=VoltVarDroop(settings.controller.voltvar_deadband, settings.controller.voltvar_saturation),
        )
        broadcast = BroadcastChannel(channel)
        nodes = {
            "plant": GridPlant(
                scenario.admittance, scenario.linear, scenario.timeline, scenario.v0,
                kind=settings.powerflow.plant, tol=settings.powerflow.tol, max_iter=settings.powerflow.max_iter,
            ),
            "sensors": VoltageSensors(
                scenario.monitored, scenario.der_nodes,
                settings.sensors.noise_bound, settings.sensors.measurement_seed,
            ),
            "channel": broadcast,
            "oracle": OracleNode(self.oracle, self._oracle_cache),
            "controller": controller,
            "recorder": recorder,
        }
        graph = self._build_graph(nodes, policy in BROADCAST_POLICIES, analysis)

        horizon = scenario.timeline.horizon
        logger.info(f"Running policy '{policy}' for {horizon} steps ({horizon * ratio} ticks)")
        state = controller.initial_state(self.instances[0])
        records: List[StepRecord] = []
        solutions = []
        events: List[str] = []
        for tick in range(horizon * ratio):
            k = tick // ratio
            out = graph.invoke({
                "tick": tick,
                "global_step": k,
                "is_global": tick % ratio == 0,
                "instance": self.instances[k],
                "controller": state,
                "events": [],
            })
            state = out["controller"]
            records.append(out["record"])
            solutions.append(out["solution"])
            events.extend(out.get("events", []))

        for event in events[:20]:
            logger.debug(event)
        stats = broadcast.channel.statistics()
        summary: Dict[str, Any] = {
            "ticks": len(records),
            "global_steps": horizon,
            "fast_ratio": ratio,
            "alpha": scenario.params.alpha,
            "bound_breach_ticks": recorder.bound_breaches,
        }
        if policy in BROADCAST_POLICIES:
            summary["loss_rate"] = stats["loss_rate"]
            summary["longest_outage"] = stats["longest_outage"]

        result = self._analyze(policy, records, solutions, analysis, caps, ratio, summary)
        logger.info(
            f"Policy '{policy}' finished: max monitored voltage {result.summary['max_voltage']:.4f} pu"
        )
        return result

    def _analyze(
        self,
        policy: PolicyName,
        records: List[StepRecord],
        solutions: List[Any],
        analysis: bool,
        caps: np.ndarray,
        ratio: int,
        summary: Dict[str, Any],
    ) -> RunResult:
        scenario = self.scenario
        settings = self.settings.analysis
        global_records = [r for r in records if r.is_global]

        setpoints = np.stack([r.setpoints for r in global_records])
        p_available = np.asarray(scenario.timeline.p_available)
        cost = TrajectoryAnalyzer.cost_series(setpoints, p_available, scenario.cost, reactive_only=policy == "voltvar")
        series: Dict[str, np.ndarray] = {"cost": cost}
        settle = min(settings.settle_steps, len(cost) - 1)
        summary["mean_cost_after_settle"] = float(np.mean(cost[settle:]))

        magnitudes = np.vstack([s.magnitudes for s in solutions])
        summary.update(TrajectoryAnalyzer.voltage_metrics(
            magnitudes,
            scenario.monitored,
            self.settings.controller.v_max,
            burn_in=settings.settle_steps * ratio,
            trace_node=self._trace_node(),
        ))

        mismatch = max((r.mismatch for r in global_records), default=0.0)
        summary["max_mismatch"] = mismatch

        bounds: Optional[BoundsReport] = None
        saddle_points: List[SaddlePoint] = []
        if policy in TRACKING_POLICIES:
            oracle_z = None
            sigma_z = 0.0
            if analysis:
                saddle_points = self.oracle_trajectory()
                oracle_z = np.stack([sp.z for sp in saddle_points])
                sigma_z = TrajectoryAnalyzer.measure_sigma_z(oracle_z)

            if policy == "synchronous":
                bound_caps, e_d = np.zeros_like(caps), 0.0
            else:
                m = len(scenario.monitored)
                bound_caps = caps
                e_d = math.sqrt(m) * self.settings.sensors.noise_bound + mismatch
            bounds = BoundsAnalyzer.compute_constants(self.instances, bound_caps, e_d=e_d, sigma_z=sigma_z)
            summary["rho"] = bounds.rho
            summary["asymptotic_bound"] = bounds.asymptotic_bound

            if oracle_z is not None:
                trajectory = self.controller_trajectory(records)
                window = max(1, int(round(settings.window_fraction * len(trajectory))))
                errors, trailing = TrajectoryAnalyzer.tracking_error_series(trajectory, oracle_z, window)
                series["tracking_error"] = errors
                series["trailing_max"] = trailing
                limsup = TrajectoryAnalyzer.empirical_limsup(
                    errors, bounds.rho, settings.burn_in_factor, settings.window_fraction
                )
                summary["empirical_limsup"] = limsup
                summary["steady_state_error"] = TrajectoryAnalyzer.steady_state_mean(
                    errors, bounds.rho, settings.burn_in_factor, settings.window_fraction
                )
                summary["bound_check"] = self._bound_check(bounds, limsup)

        return RunResult(
            policy=policy,
            records=records,
            solutions=solutions,
            bounds=bounds,
            saddle_points=saddle_points,
            series=series,
            summary=summary,
        )

    @staticmethod
    def _bound_check(bounds: BoundsReport, limsup: float) -> str:
        if not bounds.tracking_guaranteed:
            return "not guaranteed"
        if limsup <= bounds.asymptotic_bound * (1.0 + 1e-6):
            return "passed"
        logger.error(f"Empirical limsup {limsup:.4e} exceeds the asymptotic bound {bounds.asymptotic_bound:.4e}")
        return "failed"

    def _trace_node(self) -> int:
        name = self.settings.analysis.trace_node
        if name is not None and name in self.scenario.feeder.node_names:
            return self.scenario.feeder.index_of(name)
        return self.scenario.monitored[-1]

    def controller_trajectory(self, records: Sequence[StepRecord]) -> np.ndarray:
        """Stacked z^k at the global ticks: applied setpoints and the duals held before the tick."""
        m = len(self.scenario.monitored)
        gamma, mu = np.zeros(m), np.zeros(m)
        rows = []
        for record in records:
            if record.is_global:
                rows.append(np.concatenate([record.setpoints.ravel(), gamma, mu]))
            gamma, mu = record.gamma, record.mu
        return np.vstack(rows)

    def oracle_trajectory(self) -> List[SaddlePoint]:
        """Optimizers of every global step, solved once per simulator and warm-started."""
        for k, instance in enumerate(self.instances):
            if k not in self._oracle_cache:
                warm = self._oracle_cache[k - 1].u if k > 0 else None
                self._oracle_cache[k] = self.oracle.solve(instance, warm_start=warm)
        return [self._oracle_cache[k] for k in range(len(self.instances))]

    def sweep(
        self,
        p_values: Sequence[float],
        seeds: Sequence[int],
        policy: PolicyName = "feedback",
    ) -> pd.DataFrame:
        """
        Steady-state tracking error over an ensemble of channel seeds per loss probability.

        Returns:
            One row per p_loss with mean/min/max of the per-seed steady-state error
        """
        self.oracle_trajectory()
        rows = []
        for p in p_values:
            values = []
            for seed in seeds:
                result = self.run(policy, p_loss=p, channel_seed=seed, analysis=True)
                values.append(result.summary["steady_state_error"])
            rows.append({
                "p_loss": p,
                "mean_error": float(np.mean(values)),
                "min_error": float(np.min(values)),
                "max_error": float(np.max(values)),
                "seeds": len(values),
            })
            logger.info(f"p_loss={p:.2f}: mean steady-state error {rows[-1]['mean_error']:.4e}")
        return pd.DataFrame(rows)

    def bounds(self, policy: Optional[PolicyName] = None) -> BoundsReport:
        """
        Constants of the analysis for the scenario, without simulating.

        sigma_z comes from the oracle trajectory when analysis is enabled and is 0 otherwise.
        e_d covers the sensor noise only; the linearization mismatch is measured by ``run``.
        """
        policy = policy or self.settings.controller.policy
        caps = np.asarray(self.scenario.channel.staleness_cap)
        if policy == "synchronous":
            caps = np.zeros_like(caps)
        e_d = math.sqrt(len(self.scenario.monitored)) * self.settings.sensors.noise_bound
        sigma_z = 0.0
        if self.settings.analysis.enabled:
            oracle_z = np.stack([sp.z for sp in self.oracle_trajectory()])
            sigma_z = TrajectoryAnalyzer.measure_sigma_z(oracle_z)
        return BoundsAnalyzer.compute_constants(self.instances, caps, e_d=e_d, sigma_z=sigma_z)

    def save_reports(self, result: RunResult, out_dir: Optional[str] = None) -> List[Any]:
        settings = self.settings
        target = out_dir or settings.output.out_dir
        metadata = {
            "scenario": settings.name,
            "feeder": self.scenario.feeder.name,
            "settings": settings.model_dump(mode="json"),
        }
        return self.writer.save(result, np.asarray(self.scenario.timeline.p_available), target, metadata)
