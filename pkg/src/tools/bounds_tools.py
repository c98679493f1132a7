"""
Convergence and tracking constants, trajectory error series and run metrics.
"""

import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.exceptions import TrajectoryMismatchError
from src.state import BoundsReport, CostModel, ProblemInstance
from src.tools.opf_tools import coupling_norm

logger = logging.getLogger(__name__)


class BoundsAnalyzer:
    """Evaluates the constants behind the contraction and tracking guarantees."""

    @staticmethod
    def saddle_lipschitz(cost_lipschitz: float, nu: float, eps: float, g_norm: float) -> float:
        """Lipschitz constant of the saddle map: sqrt((L + nu + 2G)^2 + 2 (G + eps)^2)."""
        return math.sqrt((cost_lipschitz + nu + 2.0 * g_norm) ** 2 + 2.0 * (g_norm + eps) ** 2)

    @staticmethod
    def contraction_factor(alpha: float, eta: float, lipschitz: float) -> float:
        """rho(alpha) = sqrt(1 - 2 eta alpha + alpha^2 L^2)."""
        return math.sqrt(max(1.0 - 2.0 * eta * alpha + (alpha * lipschitz) ** 2, 0.0))

    @staticmethod
    def theory_stepsize(instance: ProblemInstance) -> float:
        """Stepsize eta / L^2 minimizing rho(alpha)."""
        params = instance.params
        lipschitz = BoundsAnalyzer.saddle_lipschitz(
            instance.cost.lipschitz, params.nu, params.eps, coupling_norm(instance)
        )
        return params.eta / lipschitz ** 2

    @staticmethod
    def constraint_extrema(instance: ProblemInstance, p_upper: Optional[np.ndarray] = None) -> Tuple[float, float]:
        """
        Bounds K, K_bar on ||g(u)||_2 and ||g_bar(u)||_2 over the box hull of the capability sets.

        Each row of the affine map is bounded by interval arithmetic with
        P in [P_min, p_upper] and Q in [-S, S]; p_upper defaults to min(P_av, S).
        """
        cap = instance.capability
        p_hi = cap.p_upper if p_upper is None else np.asarray(p_upper, dtype=float)
        base = instance.c - instance.r_check @ instance.der_load_p - instance.b_check @ instance.der_load_q
        r_lo, r_hi = instance.r_check * cap.p_min, instance.r_check * p_hi
        b_lo, b_hi = instance.b_check * -cap.rating, instance.b_check * cap.rating
        rho_lo = base + np.minimum(r_lo, r_hi).sum(axis=1) + np.minimum(b_lo, b_hi).sum(axis=1)
        rho_hi = base + np.maximum(r_lo, r_hi).sum(axis=1) + np.maximum(b_lo, b_hi).sum(axis=1)
        g_abs = np.maximum(np.abs(instance.v_min - rho_lo), np.abs(instance.v_min - rho_hi))
        gbar_abs = np.maximum(np.abs(rho_lo - instance.v_max), np.abs(rho_hi - instance.v_max))
        return float(np.linalg.norm(g_abs)), float(np.linalg.norm(gbar_abs))

    @staticmethod
    def stale_gradient_bounds(
        alpha: float,
        caps: np.ndarray,
        sensitivity_norms: np.ndarray,
        k_lower: float,
        k_upper: float,
        eps: float,
        gamma_radius: float,
        mu_radius: float,
        e_d: float,
    ) -> np.ndarray:
        """Per-DER bound alpha E_i X_i [K + K_bar + eps (D_gamma + D_mu) + 2 e_d]."""
        inner = k_lower + k_upper + eps * (gamma_radius + mu_radius) + 2.0 * e_d
        return alpha * np.asarray(caps, dtype=float) * np.asarray(sensitivity_norms) * inner

    @staticmethod
    def compute_constants(
        instances: Sequence[ProblemInstance],
        staleness_caps: np.ndarray,
        e_d: float = 0.0,
        sigma_z: float = 0.0,
    ) -> BoundsReport:
        """
        Evaluate every constant of the analysis over a run's instants.

        Args:
            instances: Instants of the run (a single frozen instant is fine)
            staleness_caps: E_i per DER
            e_d: Bound on the dual-gradient error (2-norm over the monitored set)
            sigma_z: Measured drift of the optimizer trajectory

        Returns:
            BoundsReport; ``asymptotic_bound`` is None and ``tracking_guaranteed`` False
            when rho(alpha) >= 1
        """
        if not instances:
            raise ValueError("at least one instance is required")
        first = instances[0]
        params = first.params
        eta = params.eta
        cost_lipschitz = max(inst.cost.lipschitz for inst in instances)
        g_norm = max(coupling_norm(inst) for inst in instances)
        lipschitz = BoundsAnalyzer.saddle_lipschitz(cost_lipschitz, params.nu, params.eps, g_norm)
        rho = BoundsAnalyzer.contraction_factor(params.alpha, eta, lipschitz)
        alpha_max = 2.0 * eta / lipschitz ** 2

        # setpoints applied at k were projected onto the set of k-1, so use the widest P range
        p_hi = np.max([inst.capability.p_upper for inst in instances], axis=0)
        extrema = [BoundsAnalyzer.constraint_extrema(inst, p_hi) for inst in instances]
        k_lower = max(e[0] for e in extrema)
        k_upper = max(e[1] for e in extrema)
        norms = np.max(
            [[np.linalg.norm(inst.xi(i), 2) for i in range(inst.n_der)] for inst in instances], axis=0
        )
        m = first.n_monitored
        # box radii measured in the 2-norm of the M-dimensional dual vectors
        gamma_radius = math.sqrt(m) * params.d_gamma
        mu_radius = math.sqrt(m) * params.d_mu
        lemma2 = BoundsAnalyzer.stale_gradient_bounds(
            params.alpha, staleness_caps, norms, k_lower, k_upper, params.eps, gamma_radius, mu_radius, e_d
        )
        e_u = float(np.linalg.norm(lemma2))
        e = math.sqrt(e_u ** 2 + 2.0 * e_d ** 2)
        guaranteed = 0.0 < params.alpha < alpha_max and rho < 1.0
        asymptotic = (params.alpha * e + sigma_z) / (1.0 - rho) if guaranteed else None
        if not guaranteed:
            logger.warning(
                f"alpha={params.alpha:g} outside (0, {alpha_max:.3e}): rho={rho:.4f}, tracking not guaranteed"
            )

        return BoundsReport(
            nu=params.nu,
            eps=params.eps,
            eta=eta,
            cost_lipschitz=cost_lipschitz,
            lipschitz=lipschitz,
            alpha=params.alpha,
            alpha_max=alpha_max,
            rho=rho,
            g_norm=g_norm,
            k_lower=k_lower,
            k_upper=k_upper,
            sensitivity_norms=[float(x) for x in norms],
            e_d=e_d,
            lemma2_bounds=[float(x) for x in lemma2],
            e_u=e_u,
            e=e,
            sigma_z=sigma_z,
            asymptotic_bound=asymptotic,
            tracking_guaranteed=guaranteed,
        )


class TrajectoryAnalyzer:
    """Error series and metrics over recorded trajectories."""

    @staticmethod
    def tracking_error_series(
        trajectory: np.ndarray,
        oracle: np.ndarray,
        window: Optional[int] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Distances ||z^k - z*^k|| and their trailing-window running maximum.

        Args:
            trajectory: K x d controller iterates
            oracle: K x d optimizers at the same instants
            window: Trailing window length; defaults to 20% of K

        Returns:
            (errors, trailing_max)
        """
        trajectory = np.asarray(trajectory, dtype=float)
        oracle = np.asarray(oracle, dtype=float)
        if trajectory.shape != oracle.shape:
            raise TrajectoryMismatchError(
                f"trajectory shape {trajectory.shape} does not match oracle shape {oracle.shape}"
            )
        errors = np.linalg.norm(trajectory - oracle, axis=1)
        window = window or max(1, int(round(0.2 * len(errors))))
        trailing = pd.Series(errors).rolling(window, min_periods=1).max().to_numpy()
        return errors, trailing

    @staticmethod
    def burn_in(rho: float, factor: float = 5.0) -> int:
        if rho >= 1.0:
            return 0
        return int(math.ceil(factor / (1.0 - rho)))

    @staticmethod
    def empirical_limsup(
        errors: np.ndarray,
        rho: float,
        burn_in_factor: float = 5.0,
        window_fraction: float = 0.2,
    ) -> float:
        """Max error over the final window, skipping a burn-in of factor/(1 - rho) steps."""
        errors = np.asarray(errors, dtype=float)
        if errors.size == 0:
            return 0.0
        start = max(TrajectoryAnalyzer.burn_in(rho, burn_in_factor), int(len(errors) * (1.0 - window_fraction)))
        start = min(start, len(errors) - 1)
        return float(np.max(errors[start:]))

    @staticmethod
    def steady_state_mean(
        errors: np.ndarray,
        rho: float,
        burn_in_factor: float = 5.0,
        window_fraction: float = 0.2,
    ) -> float:
        """Mean error over the same final window as empirical_limsup."""
        errors = np.asarray(errors, dtype=float)
        if errors.size == 0:
            return 0.0
        start = max(TrajectoryAnalyzer.burn_in(rho, burn_in_factor), int(len(errors) * (1.0 - window_fraction)))
        start = min(start, len(errors) - 1)
        return float(np.mean(errors[start:]))

    @staticmethod
    def measure_sigma_z(oracle: np.ndarray) -> float:
        """Largest one-step displacement of the optimizer trajectory."""
        oracle = np.asarray(oracle, dtype=float)
        if oracle.shape[0] < 2:
            return 0.0
        return float(np.max(np.linalg.norm(np.diff(oracle, axis=0), axis=1)))

    @staticmethod
    def fit_geometric_rate(errors: np.ndarray, burn_in: int = 0, floor: float = 1e-13) -> float:
        """Per-step contraction ratio from a log-linear least-squares fit."""
        tail = np.asarray(errors, dtype=float)[burn_in:]
        steps = np.flatnonzero(tail > floor)
        if steps.size < 2:
            return 0.0
        slope, _ = np.polyfit(steps, np.log(tail[steps]), 1)
        return float(np.exp(slope))

    @staticmethod
    def cost_series(
        setpoints: np.ndarray,
        p_available: np.ndarray,
        cost: CostModel,
        reactive_only: bool = False,
    ) -> np.ndarray:
        """
        Per-step dispatch cost.

        Args:
            setpoints: K x N_G x 2 applied setpoints
            p_available: K x N_G available power
            cost: Cost coefficients
            reactive_only: Count only c_q Q^2 (the Volt/VAr baseline convention)
        """
        q_cost = np.sum(cost.c_q * setpoints[:, :, 1] ** 2, axis=1)
        if reactive_only:
            return q_cost
        return q_cost + np.sum(cost.c_p * (p_available - setpoints[:, :, 0]) ** 2, axis=1)

    @staticmethod
    def voltage_metrics(
        magnitudes: np.ndarray,
        monitored: Sequence[int],
        v_max: float,
        tolerance: float = 5e-3,
        burn_in: int = 0,
        trace_node: Optional[int] = None,
    ) -> Dict[str, float]:
        """
        Regulation summary of a voltage trace.

        Args:
            magnitudes: Ticks x N magnitudes
            monitored: Monitored feeder nodes (1..N)
            v_max: Upper limit
            tolerance: Allowed excess over v_max when counting violations
            burn_in: Ticks excluded from the after-burn-in statistics
            trace_node: Feeder node whose mean |step change| is reported
        """
        rows = np.asarray(monitored, dtype=int) - 1
        peak = magnitudes[:, rows].max(axis=1)
        after = peak[burn_in:] if burn_in < len(peak) else peak[-1:]
        metrics = {
            "max_voltage": float(peak.max()),
            "max_voltage_after_burn_in": float(after.max()),
            "violation_ticks": int(np.sum(after > v_max + tolerance)),
            "max_violation": float(max(peak.max() - v_max, 0.0)),
        }
        if trace_node is not None and magnitudes.shape[0] > 1:
            metrics["mean_abs_step_trace"] = float(np.mean(np.abs(np.diff(magnitudes[:, trace_node - 1]))))
        return metrics
