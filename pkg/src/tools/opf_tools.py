"""
Optimization layer of the time-varying OPF: linear voltage constraints, the
regularized Lagrangian and its gradients, projections onto the DER capability sets
and the dual boxes, the saddle map and an exact per-instant saddle-point oracle.

Stacked vectors use the layout z = [P_1, Q_1, ..., P_G, Q_G, gamma_1..gamma_M, mu_1..mu_M].
"""

import logging
from typing import Optional, Tuple

import numpy as np

from src.exceptions import ConfigurationError, OracleError
from src.state import CapabilitySet, ProblemInstance, SaddlePoint

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-12


# ---------------------------------------------------------------------------
# Constraints and Lagrangian
# ---------------------------------------------------------------------------

def linear_magnitudes(instance: ProblemInstance, u: np.ndarray) -> np.ndarray:
    """Linearized voltage magnitudes on the monitored set for setpoints ``u``."""
    return (
        instance.c
        + instance.r_check @ (u[:, 0] - instance.der_load_p)
        + instance.b_check @ (u[:, 1] - instance.der_load_q)
    )


def eval_g(instance: ProblemInstance, u: np.ndarray) -> np.ndarray:
    """Undervoltage constraint g(u) = V_min - rho(u) (feasible when <= 0)."""
    return instance.v_min - linear_magnitudes(instance, u)


def eval_gbar(instance: ProblemInstance, u: np.ndarray) -> np.ndarray:
    """Overvoltage constraint g_bar(u) = rho(u) - V_max (feasible when <= 0)."""
    return linear_magnitudes(instance, u) - instance.v_max


def coupling_norm(instance: ProblemInstance) -> float:
    """Spectral norm G of the constraint Jacobian [R_check B_check]."""
    return float(np.linalg.norm(np.hstack([instance.r_check, instance.b_check]), 2))


def primal_gradients(
    instance: ProblemInstance,
    u: np.ndarray,
    gamma_rows: np.ndarray,
    mu_rows: np.ndarray,
) -> np.ndarray:
    """
    Gradient of the regularized Lagrangian w.r.t. each DER's setpoint.

    Args:
        instance: Problem data at this instant
        u: Setpoints, one (P, Q) row per DER
        gamma_rows: Duals as seen by each DER (N_G x M); identical rows for exact duals
        mu_rows: Same for mu

    Returns:
        N_G x 2 array of grad f_i + xi_i (mu - gamma) + nu u_i
    """
    diff = mu_rows - gamma_rows
    coupling = np.column_stack([
        np.sum(instance.r_check.T * diff, axis=1),
        np.sum(instance.b_check.T * diff, axis=1),
    ])
    return instance.cost.gradient(u, instance.capability.p_av) + coupling + instance.params.nu * u


def grad_u_lagrangian(
    i: int,
    u_i: np.ndarray,
    gamma: np.ndarray,
    mu: np.ndarray,
    instance: ProblemInstance,
) -> np.ndarray:
    """Gradient of the regularized Lagrangian w.r.t. the setpoint of DER ``i``."""
    n = instance.n_der
    c_p = np.broadcast_to(instance.cost.c_p, (n,))[i]
    c_q = np.broadcast_to(instance.cost.c_q, (n,))[i]
    p_av = instance.capability.p_av[i]
    grad_f = np.array([-2.0 * c_p * (p_av - u_i[0]), 2.0 * c_q * u_i[1]])
    return grad_f + instance.xi(i) @ (mu - gamma) + instance.params.nu * np.asarray(u_i, dtype=float)


def lagrangian_value(instance: ProblemInstance, u: np.ndarray, gamma: np.ndarray, mu: np.ndarray) -> float:
    """Regularized Lagrangian: sum f + gamma'g + mu'g_bar + nu/2 |u|^2 - eps/2 (|gamma|^2 + |mu|^2)."""
    params = instance.params
    total_cost = float(np.sum(instance.cost.value(u, instance.capability.p_av)))
    return (
        total_cost
        + float(gamma @ eval_g(instance, u))
        + float(mu @ eval_gbar(instance, u))
        + 0.5 * params.nu * float(np.sum(u * u))
        - 0.5 * params.eps * float(gamma @ gamma + mu @ mu)
    )


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def project_capability(capability: CapabilitySet, points: np.ndarray) -> np.ndarray:
    """
    Euclidean projection onto {P_min <= P <= min(P_av, S), P^2 + Q^2 <= S^2}, per DER.

    Candidates are the strip-clamped point, the radial point on the disk and the
    nearest points of the two vertical edges; the projection is the nearest feasible one.

    Args:
        capability: Capability sets of all DERs
        points: N_G x 2 array (a single 2-vector is accepted when N_G == 1)

    Returns:
        Projected points with the shape of ``points``

    Raises:
        ConfigurationError: some set is empty
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    if pts.shape[0] != capability.size:
        raise ConfigurationError(f"{pts.shape[0]} points for {capability.size} capability sets")
    empty = capability.is_empty()
    if np.any(empty):
        raise ConfigurationError(f"empty capability set for DER(s) {np.flatnonzero(empty).tolist()}")

    lo, hi, s = capability.p_min, capability.p_upper, capability.rating
    x, y = pts[:, 0], pts[:, 1]
    radius = np.hypot(x, y)
    scale = np.divide(s, radius, out=np.ones_like(radius), where=radius > 0.0)
    h_lo = np.sqrt(np.maximum(s * s - lo * lo, 0.0))
    h_hi = np.sqrt(np.maximum(s * s - hi * hi, 0.0))

    cand_p = np.column_stack([np.clip(x, lo, hi), x * scale, lo, hi])
    cand_q = np.column_stack([y, y * scale, np.clip(y, -h_lo, h_lo), np.clip(y, -h_hi, h_hi)])

    feasible = (
        (cand_p >= (lo - FEASIBILITY_TOL)[:, None])
        & (cand_p <= (hi + FEASIBILITY_TOL)[:, None])
        & (cand_p ** 2 + cand_q ** 2 <= (s * s * (1.0 + FEASIBILITY_TOL))[:, None])
    )
    dist = (cand_p - x[:, None]) ** 2 + (cand_q - y[:, None]) ** 2
    dist = np.where(feasible, dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(pts.shape[0])
    out = np.column_stack([cand_p[rows, best], cand_q[rows, best]])
    return out[0] if single else out


def project_dual(x: np.ndarray, radius: float) -> np.ndarray:
    """Clamp to the dual box [0, radius]."""
    return np.clip(x, 0.0, radius)


# ---------------------------------------------------------------------------
# Saddle map
# ---------------------------------------------------------------------------

def pack_z(u: np.ndarray, gamma: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(u, dtype=float).ravel(), gamma, mu])


def unpack_z(instance: ProblemInstance, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    g, m = instance.n_der, instance.n_monitored
    z = np.asarray(z, dtype=float)
    if z.shape != (2 * g + 2 * m,):
        raise ValueError(f"z must have length {2 * g + 2 * m}, got {z.shape}")
    return z[: 2 * g].reshape(g, 2), z[2 * g: 2 * g + m], z[2 * g + m:]


def primal_update(
    instance: ProblemInstance,
    u: np.ndarray,
    gamma_rows: np.ndarray,
    mu_rows: np.ndarray,
    alpha: Optional[float] = None,
) -> np.ndarray:
    """Projected primal gradient step with per-DER dual views."""
    alpha = instance.params.alpha if alpha is None else alpha
    grad = primal_gradients(instance, u, gamma_rows, mu_rows)
    return project_capability(instance.capability, u - alpha * grad)


def dual_ascent(dual: np.ndarray, violation: np.ndarray, eps: float, alpha: float, radius: float) -> np.ndarray:
    """Projected regularized ascent: clip(dual + alpha (violation - eps dual), 0, radius)."""
    return project_dual(dual + alpha * (violation - eps * dual), radius)


def phi_map(instance: ProblemInstance, z: np.ndarray) -> np.ndarray:
    """Saddle map [grad_u L; -(g - eps gamma); -(g_bar - eps mu)]."""
    u, gamma, mu = unpack_z(instance, z)
    rows = (instance.n_der, 1)
    grads = primal_gradients(instance, u, np.tile(gamma, rows), np.tile(mu, rows))
    eps = instance.params.eps
    return np.concatenate([
        grads.ravel(),
        -(eval_g(instance, u) - eps * gamma),
        -(eval_gbar(instance, u) - eps * mu),
    ])


def projected_step(instance: ProblemInstance, z: np.ndarray, alpha: Optional[float] = None) -> np.ndarray:
    """One synchronous primal-dual step z -> proj(z - alpha Phi(z))."""
    params = instance.params
    alpha = params.alpha if alpha is None else alpha
    u, gamma, mu = unpack_z(instance, z)
    rows = (instance.n_der, 1)
    u_next = primal_update(instance, u, np.tile(gamma, rows), np.tile(mu, rows), alpha)
    gamma_next = dual_ascent(gamma, eval_g(instance, u), params.eps, alpha, params.d_gamma)
    mu_next = dual_ascent(mu, eval_gbar(instance, u), params.eps, alpha, params.d_mu)
    return pack_z(u_next, gamma_next, mu_next)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

class SaddlePointOracle:
    """
    Exact saddle point of the regularized Lagrangian at a frozen instant.

    For fixed u the inner dual maximization is separable and solved by
    gamma(u) = clip(g(u)/eps, 0, D_gamma), mu(u) = clip(g_bar(u)/eps, 0, D_mu). The
    remaining problem in u is smooth and strongly convex over the capability sets and
    is minimized by accelerated projected gradient with gradient-based restarts. The
    result is accepted only when one synchronous step moves it by at most ``tol``.
    """

    def __init__(self, tol: float = 1e-10, max_iter: int = 200_000, check_every: int = 20):
        if tol <= 0.0:
            raise ValueError("oracle tolerance must be positive")
        self.tol = tol
        self.max_iter = max_iter
        self.check_every = check_every

    @staticmethod
    def dual_response(instance: ProblemInstance, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        params = instance.params
        gamma = project_dual(eval_g(instance, u) / params.eps, params.d_gamma)
        mu = project_dual(eval_gbar(instance, u) / params.eps, params.d_mu)
        return gamma, mu

    def reduced_gradient(self, instance: ProblemInstance, u: np.ndarray) -> np.ndarray:
        gamma, mu = self.dual_response(instance, u)
        diff = mu - gamma
        coupling = np.column_stack([instance.r_check.T @ diff, instance.b_check.T @ diff])
        return instance.cost.gradient(u, instance.capability.p_av) + coupling + instance.params.nu * u

    def fixed_point_residual(self, instance: ProblemInstance, z: np.ndarray) -> float:
        alpha = instance.params.alpha
        if alpha <= 0.0:
            alpha = 1.0 / self._smoothness(instance)
        return float(np.linalg.norm(projected_step(instance, z, alpha) - z))

    def solve(self, instance: ProblemInstance, warm_start: Optional[np.ndarray] = None) -> SaddlePoint:
        """
        Solve for z* at ``instance``.

        Args:
            instance: Frozen problem instance
            warm_start: Optional N_G x 2 starting setpoints (e.g. the previous u*)

        Returns:
            SaddlePoint with certified fixed-point residual

        Raises:
            OracleError: no certified point within max_iter iterations
        """
        smooth = self._smoothness(instance)
        strong = instance.cost.strong_convexity + instance.params.nu
        step = 1.0 / smooth
        root = np.sqrt(min(strong / smooth, 1.0))
        momentum = (1.0 - root) / (1.0 + root)

        if warm_start is None:
            start = np.column_stack([instance.capability.p_upper, np.zeros(instance.n_der)])
        else:
            start = np.asarray(warm_start, dtype=float)
        x = project_capability(instance.capability, start)
        x_prev = x
        residual = np.inf

        for iteration in range(1, self.max_iter + 1):
            y = x + momentum * (x - x_prev)
            x_prev = x
            x = project_capability(instance.capability, y - step * self.reduced_gradient(instance, y))
            if np.sum((y - x) * (x - x_prev)) > 0.0:
                x_prev = x

            if iteration % self.check_every == 0 or iteration == self.max_iter:
                gamma, mu = self.dual_response(instance, x)
                z = pack_z(x, gamma, mu)
                residual = self.fixed_point_residual(instance, z)
                if residual <= self.tol:
                    logger.debug(f"Oracle certified k={instance.k} after {iteration} iterations "
                                 f"(residual {residual:.2e})")
                    return SaddlePoint(u=x, gamma=gamma, mu=mu, residual=residual, iterations=iteration)

        raise OracleError(
            f"saddle-point oracle did not certify instant {instance.k} within {self.max_iter} "
            f"iterations (residual {residual:.3e}, tol {self.tol:.1e})"
        )

    @staticmethod
    def _smoothness(instance: ProblemInstance) -> float:
        # g and g_bar cannot be positive at the same node, so only one clip is active per row
        g_norm = coupling_norm(instance)
        return instance.cost.lipschitz + instance.params.nu + g_norm ** 2 / instance.params.eps
