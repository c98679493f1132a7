"""
Dispatch policies: synchronous model-based primal-dual, measurement feedback with
lossy dual broadcast, its fast local-update variant, the Volt/VAr droop baseline and
the uncontrolled baseline. DispatchController wires the configured policy into the
closed-loop graph.
"""

import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ConfigurationError, ControllerStepError, DualBoxSaturationError
from src.state import CapabilitySet, ControllerState, LoopState, PolicyName, ProblemInstance
from src.tools.opf_tools import dual_ascent, eval_g, eval_gbar, primal_update, project_capability

logger = logging.getLogger(__name__)


def initial_state(instance: ProblemInstance) -> ControllerState:
    """DERs start at (P_av, 0) with all multipliers and their copies at zero."""
    u0 = project_capability(
        instance.capability,
        np.column_stack([instance.capability.p_av, np.zeros(instance.n_der)]),
    )
    zeros = np.zeros(instance.n_monitored)
    copies = np.zeros((instance.n_der, instance.n_monitored))
    return ControllerState(
        u=u0, gamma=zeros, mu=zeros, gamma_copies=copies, mu_copies=copies,
        last_delivery=np.zeros(instance.n_der, dtype=np.int64), k=0,
    )


def check_dual_box(state: ControllerState, instance: ProblemInstance) -> None:
    """Raise when a multiplier (aggregator or DER copy) touches its box radius."""
    params = instance.params
    if (
        np.any(state.gamma >= params.d_gamma) or np.any(state.mu >= params.d_mu)
        or np.any(state.gamma_copies >= params.d_gamma) or np.any(state.mu_copies >= params.d_mu)
    ):
        raise DualBoxSaturationError(
            f"dual iterate reached the box at tick {state.k}; increase d_gamma/d_mu "
            f"(currently {params.d_gamma:g}/{params.d_mu:g})"
        )


def _validated_measurements(measurements: Any, size: int, what: str) -> np.ndarray:
    m = np.asarray(measurements, dtype=float) if measurements is not None else None
    if m is None or m.shape != (size,):
        raise ControllerStepError(f"{what} must cover all {size} nodes")
    if not np.all(np.isfinite(m)):
        missing = np.flatnonzero(~np.isfinite(m)).tolist()
        raise ControllerStepError(f"{what} missing at positions {missing}")
    return m


def stale_gradient_errors(state: ControllerState, instance: ProblemInstance) -> np.ndarray:
    """Per-DER gradient error from using the held dual copies instead of the current duals."""
    diff = (state.mu_copies - state.gamma_copies) - (state.mu - state.gamma)[None, :]
    p_part = np.sum(instance.r_check.T * diff, axis=1)
    q_part = np.sum(instance.b_check.T * diff, axis=1)
    return np.hypot(p_part, q_part)


class SynchronousPrimalDual:
    """Model-based primal-dual iteration with exact multipliers and full load knowledge."""

    @staticmethod
    def primal_dual_step(state: ControllerState, instance: ProblemInstance) -> ControllerState:
        params = instance.params
        rows = (instance.n_der, 1)
        u_next = primal_update(instance, state.u, np.tile(state.gamma, rows), np.tile(state.mu, rows))
        gamma_next = dual_ascent(state.gamma, eval_g(instance, state.u), params.eps, params.alpha, params.d_gamma)
        mu_next = dual_ascent(state.mu, eval_gbar(instance, state.u), params.eps, params.alpha, params.d_mu)
        return ControllerState(
            u=u_next, gamma=gamma_next, mu=mu_next,
            gamma_copies=np.tile(gamma_next, rows), mu_copies=np.tile(mu_next, rows),
            last_delivery=np.full(instance.n_der, state.k + 1), k=state.k + 1,
        )


class MeasurementFeedback:
    """
    Aggregator updates the multipliers from voltage measurements and broadcasts them;
    each DER steps with the most recent copy it received. No load data is used.
    """

    @staticmethod
    def feedback_step(
        state: ControllerState,
        measurements: np.ndarray,
        delivered: np.ndarray,
        instance: ProblemInstance,
    ) -> Tuple[ControllerState, np.ndarray]:
        """
        One tick of the feedback controller.

        Args:
            state: Current controller state (u^k and the held copies)
            measurements: Voltage magnitudes on the monitored set at tick k
            delivered: Broadcast outcome per DER for the duals computed at this tick
            instance: Cost, sensitivities and capability sets at tick k

        Returns:
            (next state, per-DER stale-gradient error of the primal step just taken)
        """
        params = instance.params
        m = _validated_measurements(measurements, instance.n_monitored, "measurements")
        delivered = np.asarray(delivered, dtype=bool)
        if delivered.shape != (instance.n_der,):
            raise ControllerStepError("delivery bitmap must have one entry per DER")

        errors = stale_gradient_errors(state, instance)
        u_next = primal_update(instance, state.u, state.gamma_copies, state.mu_copies)
        gamma_next = dual_ascent(state.gamma, instance.v_min - m, params.eps, params.alpha, params.d_gamma)
        mu_next = dual_ascent(state.mu, m - instance.v_max, params.eps, params.alpha, params.d_mu)

        received = delivered[:, None]
        return ControllerState(
            u=u_next, gamma=gamma_next, mu=mu_next,
            gamma_copies=np.where(received, gamma_next[None, :], state.gamma_copies),
            mu_copies=np.where(received, mu_next[None, :], state.mu_copies),
            last_delivery=np.where(delivered, state.k + 1, state.last_delivery),
            k=state.k + 1,
        ), errors


class FastLocalFeedback:
    """
    Feedback controller with fast local action: DERs step every fast tick and, whenever
    no fresh multipliers arrive, update the entry of their copy that belongs to their
    own node from the local voltage.
    """

    def __init__(self, monitored: Sequence[int], der_nodes: Sequence[int]):
        monitored = list(monitored)
        missing = [node for node in der_nodes if node not in monitored]
        if missing:
            raise ConfigurationError(f"fast local updates need every DER node monitored; missing {missing}")
        self.local_index = np.array([monitored.index(node) for node in der_nodes], dtype=int)

    def aggregator_update(
        self, state: ControllerState, measurements: np.ndarray, instance: ProblemInstance
    ) -> Tuple[np.ndarray, np.ndarray]:
        params = instance.params
        m = _validated_measurements(measurements, instance.n_monitored, "measurements")
        gamma_next = dual_ascent(state.gamma, instance.v_min - m, params.eps, params.alpha, params.d_gamma)
        mu_next = dual_ascent(state.mu, m - instance.v_max, params.eps, params.alpha, params.d_mu)
        return gamma_next, mu_next

    def local_fast_step(
        self,
        state: ControllerState,
        local_measurements: np.ndarray,
        instance: ProblemInstance,
        global_duals: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    ) -> ControllerState:
        """
        One fast tick.

        Args:
            state: Current state
            local_measurements: Voltage magnitude at each DER's own node
            instance: Data of the current global period
            global_duals: (gamma, mu, delivered) on global ticks, None on fast-only ticks

        Returns:
            Next state; delivered DERs replace their copies wholesale, the others
            update only their own entry
        """
        params = instance.params
        m_local = _validated_measurements(local_measurements, instance.n_der, "local measurements")
        u_next = primal_update(instance, state.u, state.gamma_copies, state.mu_copies)

        if global_duals is None:
            gamma, mu = state.gamma, state.mu
            delivered = np.zeros(instance.n_der, dtype=bool)
        else:
            gamma, mu, delivered = global_duals
            delivered = np.asarray(delivered, dtype=bool)

        gamma_copies = np.where(delivered[:, None], gamma[None, :], state.gamma_copies)
        mu_copies = np.where(delivered[:, None], mu[None, :], state.mu_copies)

        local = ~delivered
        rows = np.flatnonzero(local)
        cols = self.local_index[local]
        gamma_copies[rows, cols] = dual_ascent(
            state.gamma_copies[rows, cols], instance.v_min - m_local[local], params.eps, params.alpha, params.d_gamma
        )
        mu_copies[rows, cols] = dual_ascent(
            state.mu_copies[rows, cols], m_local[local] - instance.v_max, params.eps, params.alpha, params.d_mu
        )

        return ControllerState(
            u=u_next, gamma=gamma, mu=mu,
            gamma_copies=gamma_copies, mu_copies=mu_copies,
            last_delivery=np.where(delivered, state.k + 1, state.last_delivery),
            k=state.k + 1,
        )


class VoltVarDroop:
    """Local reactive droop: no absorption up to the deadband, full absorption at saturation."""

    def __init__(self, deadband: float = 1.0, saturation: float = 1.05):
        if saturation <= deadband:
            raise ConfigurationError("droop saturation voltage must exceed the deadband")
        self.deadband = deadband
        self.saturation = saturation

    def voltvar_step(self, local_voltage: np.ndarray, capability: CapabilitySet) -> np.ndarray:
        """Reactive setpoints for measured local voltages; P stays at P_av."""
        m = np.asarray(local_voltage, dtype=float)
        if np.any(m <= 0.0):
            raise ControllerStepError("local voltage magnitudes must be positive")
        headroom = np.sqrt(np.maximum(capability.rating ** 2 - capability.p_upper ** 2, 0.0))
        fraction = np.clip((m - self.deadband) / (self.saturation - self.deadband), 0.0, 1.0)
        return -fraction * headroom


class DispatchController:
    """Graph node advancing the configured policy by one controller tick."""

    def __init__(
        self,
        policy: PolicyName,
        fast: Optional[FastLocalFeedback] = None,
        droop: Optional[VoltVarDroop] = None,
    ):
        if policy == "feedback-fast" and fast is None:
            raise ConfigurationError("feedback-fast needs the monitored/DER layout")
        self.policy = policy
        self.fast = fast
        self.droop = droop or VoltVarDroop()

    def initial_state(self, instance: ProblemInstance) -> ControllerState:
        return initial_state(instance)

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        """Advance the controller; the previous state is kept as the one that was applied."""
        current = state["controller"]
        instance = state["instance"]
        diagnostics: Dict[str, Any] = {}

        if self.policy == "synchronous":
            nxt = SynchronousPrimalDual.primal_dual_step(current, instance)
        elif self.policy == "feedback":
            nxt, errors = MeasurementFeedback.feedback_step(
                current, state["monitored_measurements"], state["delivered"], instance
            )
            diagnostics["stale_gradient_error"] = errors
        elif self.policy == "feedback-fast":
            global_duals = None
            if state["is_global"]:
                gamma, mu = self.fast.aggregator_update(current, state["monitored_measurements"], instance)
                global_duals = (gamma, mu, state["delivered"])
            nxt = self.fast.local_fast_step(current, state["der_measurements"], instance, global_duals)
        elif self.policy == "voltvar":
            q = self.droop.voltvar_step(state["der_measurements"], instance.capability)
            nxt = self._hold_duals(current, np.column_stack([instance.capability.p_upper, q]))
        else:
            nxt = self._hold_duals(
                current, np.column_stack([instance.capability.p_upper, np.zeros(instance.n_der)])
            )

        check_dual_box(nxt, instance)
        return {"controller": nxt, "applied": current, "diagnostics": diagnostics}

    @staticmethod
    def _hold_duals(current: ControllerState, u: np.ndarray) -> ControllerState:
        return ControllerState(
            u=u, gamma=current.gamma, mu=current.mu,
            gamma_copies=current.gamma_copies, mu_copies=current.mu_copies,
            last_delivery=np.full(current.u.shape[0], current.k + 1), k=current.k + 1,
        )
