"""
Analysis graph nodes: the saddle-point oracle riding along the loop, and the recorder
that checks every tick against the staleness cap and the stale-gradient bound.
"""

import logging
import math
from typing import Any, Dict, List, Optional

import numpy as np

from src.exceptions import BoundViolationError, ControllerStepError
from src.state import BoundsReport, LoopState, PolicyName, SaddlePoint, StepRecord
from src.tools.bounds_tools import BoundsAnalyzer
from src.tools.opf_tools import SaddlePointOracle

logger = logging.getLogger(__name__)


class OracleNode:
    """
    Solves the time-varying problem at each global step, warm-started from the
    previous optimizer. Solutions are cached per step and shared between runs of the
    same scenario.
    """

    def __init__(self, oracle: SaddlePointOracle, cache: Dict[int, SaddlePoint]):
        self.oracle = oracle
        self.cache = cache

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        k = state["global_step"]
        if k not in self.cache:
            previous = self.cache.get(k - 1)
            warm = previous.u if previous is not None else None
            self.cache[k] = self.oracle.solve(state["instance"], warm_start=warm)
        return {"saddle": self.cache[k]}


class RunRecorder:
    """
    Builds the StepRecord of each tick and runs the runtime checks.

    Staleness is checked against ``staleness_limit`` (in controller ticks). When a
    stale-gradient diagnostic is present and ``baseline`` carries the constants of the
    run, each DER's error is compared with its bound evaluated at the largest
    linearization mismatch seen so far.
    """

    def __init__(
        self,
        policy: PolicyName,
        staleness_limit: np.ndarray,
        baseline: Optional[BoundsReport] = None,
        staleness_caps: Optional[np.ndarray] = None,
        noise_bound: float = 0.0,
        d_gamma: float = 1e3,
        d_mu: float = 1e3,
        enforce: bool = True,
    ):
        self.policy = policy
        self.staleness_limit = np.asarray(staleness_limit, dtype=np.int64)
        self.baseline = baseline
        self.staleness_caps = staleness_caps
        self.noise_bound = noise_bound
        self.d_gamma = d_gamma
        self.d_mu = d_mu
        self.enforce = enforce
        self.worst_mismatch = 0.0
        self.bound_breaches: List[int] = []

    def current_bounds(self, n_monitored: int) -> np.ndarray:
        """Per-DER stale-gradient bounds using the running dual-error estimate."""
        report = self.baseline
        e_d = math.sqrt(n_monitored) * self.noise_bound + self.worst_mismatch
        return BoundsAnalyzer.stale_gradient_bounds(
            report.alpha,
            self.staleness_caps,
            np.asarray(report.sensitivity_norms),
            report.k_lower,
            report.k_upper,
            report.eps,
            math.sqrt(n_monitored) * self.d_gamma,
            math.sqrt(n_monitored) * self.d_mu,
            e_d,
        )

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        applied = state["applied"]
        nxt = state["controller"]
        instance = state["instance"]
        tick = state["tick"]

        staleness = applied.staleness
        if np.any(staleness > self.staleness_limit):
            raise ControllerStepError(
                f"tick {tick}: staleness {staleness.tolist()} exceeds limit {self.staleness_limit.tolist()}"
            )

        self.worst_mismatch = max(self.worst_mismatch, float(state.get("mismatch", 0.0)))
        errors = state.get("diagnostics", {}).get("stale_gradient_error")
        if errors is not None and self.baseline is not None and self.staleness_caps is not None:
            bounds = self.current_bounds(instance.n_monitored)
            over = np.flatnonzero(errors > bounds * (1.0 + 1e-9) + 1e-12)
            if over.size:
                self.bound_breaches.append(tick)
                message = (
                    f"tick {tick}: stale-gradient error {errors[over].tolist()} above bound "
                    f"{bounds[over].tolist()} at DER(s) {over.tolist()}"
                )
                if self.enforce:
                    raise BoundViolationError(message)
                logger.warning(message)

        record = StepRecord(
            tick=tick,
            global_step=state["global_step"],
            is_global=state["is_global"],
            policy=self.policy,
            setpoints=applied.u,
            measurements=state["monitored_measurements"],
            gamma=nxt.gamma,
            mu=nxt.mu,
            delivered=state.get("delivered"),
            staleness=staleness,
            stale_gradient_error=errors,
            mismatch=float(state.get("mismatch", 0.0)),
        )
        return {"record": record}
