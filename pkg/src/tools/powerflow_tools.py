"""
Physical plant: Z-bus fixed-point AC power flow, its linear stand-in, and the
voltage sensors that sample either of them.
"""

import logging
from typing import Optional, Sequence, Union

import numpy as np

from src.exceptions import InputError, PowerFlowDivergedError
from src.state import AdmittanceModel, InjectionProfile, LinearModel, ProblemInstance, VoltageSolution
from src.tools.opf_tools import linear_magnitudes

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], None]


def assemble_injections(
    n_nodes: int,
    der_nodes: Sequence[int],
    u: np.ndarray,
    load_p: np.ndarray,
    load_q: np.ndarray,
) -> InjectionProfile:
    """p_n = P_n - P_l,n at DER nodes, p_n = -P_l,n elsewhere (same for q)."""
    p = -np.asarray(load_p, dtype=float).copy()
    q = -np.asarray(load_q, dtype=float).copy()
    if p.shape != (n_nodes,) or q.shape != (n_nodes,):
        raise InputError(f"load vectors must have length {n_nodes}")
    rows = np.asarray(der_nodes, dtype=int) - 1
    p[rows] += u[:, 0]
    q[rows] += u[:, 1]
    return InjectionProfile(p=p, q=q)


class ZBusPowerFlow:
    """Fixed-point power flow v <- Y^-1 (conj(s)/conj(v) - V0 y_bar), started at no load."""

    def __init__(self, adm: AdmittanceModel, v0: complex):
        self.adm = adm
        self.v0 = v0
        self.z_bus = np.linalg.inv(adm.y)
        self.no_load = -(self.z_bus @ adm.y_bar) * v0

    def residual(self, v: np.ndarray, s: np.ndarray) -> float:
        """Power-balance mismatch max |v conj(i) - s| with i = V0 y_bar + Y v."""
        current = self.v0 * self.adm.y_bar + self.adm.y @ v
        return float(np.max(np.abs(v * np.conj(current) - s), initial=0.0))

    def solve(self, inj: InjectionProfile, tol: float = 1e-8, max_iter: int = 100) -> VoltageSolution:
        """
        Solve the AC power-flow equations for the given injections.

        Raises:
            PowerFlowDivergedError: residual still above ``tol`` after ``max_iter`` checks
        """
        if tol <= 0.0 or max_iter < 1:
            raise InputError("power flow needs tol > 0 and max_iter >= 1")
        s = inj.s
        if s.shape != self.no_load.shape:
            raise InputError(f"injection length {s.shape[0]} does not match {self.no_load.shape[0]} nodes")

        v = self.no_load.copy()
        residual = np.inf
        for iteration in range(1, max_iter + 1):
            residual = self.residual(v, s)
            if residual <= tol:
                logger.debug(f"Power flow converged in {iteration} iteration(s), residual {residual:.2e}")
                return VoltageSolution(
                    v=v, magnitudes=np.abs(v), converged=True, iterations=iteration, residual=residual
                )
            if not np.isfinite(residual):
                break
            v = self.z_bus @ np.conj(s / v) + self.no_load
        raise PowerFlowDivergedError(float(residual), max_iter)


def solve_powerflow(
    adm: AdmittanceModel,
    inj: InjectionProfile,
    v0: complex,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> VoltageSolution:
    """One-shot power flow; use ZBusPowerFlow directly to reuse the factorization."""
    return ZBusPowerFlow(adm, v0).solve(inj, tol=tol, max_iter=max_iter)


class LinearPlant:
    """
    Plant that answers with the linear model instead of the AC equations.
    Monitored magnitudes are produced by the same arithmetic as the constraint
    functions, so model-based and measurement-based controllers see identical numbers.
    """

    def __init__(self, lin: LinearModel):
        self.lin = lin
        self._rows = np.asarray(lin.monitored, dtype=int) - 1

    def solve(self, inj: InjectionProfile, instance: ProblemInstance, u: np.ndarray) -> VoltageSolution:
        v_lin = self.lin.h_sens @ inj.p + self.lin.j_sens @ inj.q + self.lin.b_offset
        magnitudes = self.lin.predict(inj.p, inj.q)
        magnitudes[self._rows] = linear_magnitudes(instance, u)
        v = magnitudes * np.exp(1j * np.angle(v_lin))
        return VoltageSolution(v=v, magnitudes=magnitudes, converged=True, iterations=0, residual=0.0)


def measure_voltages(
    sol: VoltageSolution,
    nodes: Sequence[int],
    noise_bound: float = 0.0,
    seed: SeedLike = None,
) -> np.ndarray:
    """
    Sample voltage magnitudes at feeder nodes with bounded uniform noise.

    Args:
        sol: Power-flow solution
        nodes: Feeder nodes (1..N) to measure, in output order
        noise_bound: Half-width of the uniform noise; zero returns exact magnitudes
        seed: Seed (or seed sequence) of the noise draw

    Returns:
        Measurements aligned with ``nodes``
    """
    if noise_bound < 0.0:
        raise InputError("noise_bound must be nonnegative")
    rows = np.asarray(nodes, dtype=int) - 1
    if rows.size and (rows.min() < 0 or rows.max() >= sol.magnitudes.shape[0]):
        raise InputError("measurement nodes outside 1..N")
    exact = np.array(sol.magnitudes[rows], dtype=float)
    if noise_bound == 0.0:
        return exact
    rng = np.random.default_rng(seed)
    return exact + rng.uniform(-noise_bound, noise_bound, size=exact.shape)
