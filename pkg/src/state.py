"""
Domain state for feeder models, controllers and closed-loop runs.
Numerical payloads are numpy arrays carried inside frozen pydantic models; validators
coerce inputs, freeze the arrays and enforce the invariants each type promises.
"""

import operator
from typing import Annotated, Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import TypedDict


ARRAY_MODEL = ConfigDict(frozen=True, arbitrary_types_allowed=True)

PolicyName = Literal["none", "synchronous", "feedback", "feedback-fast", "voltvar"]


def frozen_array(value: Any, dtype: Any = float) -> np.ndarray:
    """Copy ``value`` into a read-only numpy array of ``dtype``."""
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Network model
# ---------------------------------------------------------------------------

class Branch(BaseModel):
    """Series impedance plus total line charging between two nodes (per-unit)."""
    model_config = ConfigDict(frozen=True)

    from_node: int = Field(ge=0)
    to_node: int = Field(ge=0)
    r: float = Field(description="Series resistance (pu)")
    x: float = Field(description="Series reactance (pu)")
    b: float = Field(default=0.0, description="Total shunt susceptance, split half per end (pu)")

    @property
    def impedance(self) -> complex:
        return complex(self.r, self.x)

    @property
    def shunt(self) -> complex:
        return complex(0.0, self.b)


class DerUnit(BaseModel):
    """Inverter-interfaced DER attached to a non-slack node."""
    model_config = ConfigDict(frozen=True)

    node: int = Field(ge=1, description="Feeder node index (slack is 0)")
    rating: float = Field(gt=0.0, description="Apparent power rating S_i (pu)")
    p_min: float = Field(default=0.0, description="Minimum real power P_i^min (pu)")


class FeederModel(BaseModel):
    """
    Feeder with N+1 nodes, node 0 being the slack bus.

    Node indices follow declaration order in the feeder file. Loads are the nominal
    per-node spot loads in per-unit; the scenario scales them over time.
    """
    model_config = ARRAY_MODEL

    name: str
    node_names: List[str] = Field(min_length=2)
    branches: List[Branch]
    slack_magnitude: float = Field(gt=0.0)
    slack_angle_deg: float = 0.0
    base_kva: float = Field(gt=0.0)
    base_kv: float = Field(gt=0.0)
    der_units: List[DerUnit]
    monitored: List[int]
    nominal_load_p: np.ndarray
    nominal_load_q: np.ndarray

    @field_validator("nominal_load_p", "nominal_load_q", mode="before")
    @classmethod
    def _coerce_loads(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check_indices(self) -> "FeederModel":
        n = self.n_nodes
        for branch in self.branches:
            for end in (branch.from_node, branch.to_node):
                if end > n:
                    raise ValueError(f"branch endpoint {end} outside 0..{n}")
            if branch.from_node == branch.to_node:
                raise ValueError(f"self-loop at node {branch.from_node}")
        der_nodes = [d.node for d in self.der_units]
        if len(set(der_nodes)) != len(der_nodes):
            raise ValueError("a node carries more than one DER")
        if any(node > n for node in der_nodes):
            raise ValueError("DER node index outside 1..N")
        if any(node < 1 or node > n for node in self.monitored):
            raise ValueError("monitored node index outside 1..N")
        if len(set(self.monitored)) != len(self.monitored):
            raise ValueError("monitored node listed twice")
        if self.nominal_load_p.shape != (n,) or self.nominal_load_q.shape != (n,):
            raise ValueError(f"nominal loads must have length N={n}")
        return self

    @property
    def n_nodes(self) -> int:
        """Number of non-slack nodes N."""
        return len(self.node_names) - 1

    @property
    def slack_voltage(self) -> complex:
        return complex(self.slack_magnitude * np.exp(1j * np.deg2rad(self.slack_angle_deg)))

    @property
    def der_nodes(self) -> List[int]:
        return [d.node for d in self.der_units]

    @property
    def ratings(self) -> np.ndarray:
        return np.array([d.rating for d in self.der_units])

    @property
    def p_min(self) -> np.ndarray:
        return np.array([d.p_min for d in self.der_units])

    def index_of(self, name: str) -> int:
        try:
            return self.node_names.index(name)
        except ValueError:
            raise KeyError(f"unknown node '{name}'") from None


class AdmittanceModel(BaseModel):
    """Reduced bus admittance: i = V0 * y_bar + Y v over the N non-slack nodes."""
    model_config = ARRAY_MODEL

    y: np.ndarray = Field(description="N x N complex admittance, slack row/column removed")
    y_bar: np.ndarray = Field(description="Slack column of the full admittance matrix")

    @field_validator("y", "y_bar", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return frozen_array(value, complex)

    @model_validator(mode="after")
    def _check_shapes(self) -> "AdmittanceModel":
        n = self.y_bar.shape[0]
        if self.y.shape != (n, n):
            raise ValueError(f"Y must be {n}x{n}, got {self.y.shape}")
        return self

    @property
    def n_nodes(self) -> int:
        return self.y_bar.shape[0]


class LinearModel(BaseModel):
    """
    Linearized voltage model around the no-load profile.

    ``v ~ H p + J q + b`` and ``|v| ~ R p + B q + a``; matrices are indexed by the
    non-slack node (row n-1 for node n). The ``*_check`` slices keep the rows of the
    monitored set and the columns of the DER nodes, in the order given at construction.
    """
    model_config = ARRAY_MODEL

    r_sens: np.ndarray
    b_sens: np.ndarray
    h_sens: np.ndarray
    j_sens: np.ndarray
    a_offset: np.ndarray
    b_offset: np.ndarray
    monitored: List[int] = Field(description="Monitored feeder nodes (1..N)")
    der_nodes: List[int] = Field(description="DER feeder nodes (1..N)")
    r_check: np.ndarray = Field(description="R restricted to monitored rows, DER columns")
    b_check: np.ndarray = Field(description="B restricted to monitored rows, DER columns")
    sensitivity_norms: np.ndarray = Field(description="Spectral norm of each DER's 2 x M block")

    @field_validator("r_sens", "b_sens", "a_offset", "r_check", "b_check", "sensitivity_norms", mode="before")
    @classmethod
    def _coerce_real(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @field_validator("h_sens", "j_sens", "b_offset", mode="before")
    @classmethod
    def _coerce_complex(cls, value: Any) -> np.ndarray:
        return frozen_array(value, complex)

    @model_validator(mode="after")
    def _check_dimensions(self) -> "LinearModel":
        n = self.a_offset.shape[0]
        for name in ("r_sens", "b_sens", "h_sens", "j_sens"):
            if getattr(self, name).shape != (n, n):
                raise ValueError(f"{name} must be {n}x{n}")
        _finite(self.r_sens, "R")
        _finite(self.b_sens, "B")
        shape = (len(self.monitored), len(self.der_nodes))
        if self.r_check.shape != shape or self.b_check.shape != shape:
            raise ValueError(f"sensitivity slices must be {shape}")
        if self.sensitivity_norms.shape != (len(self.der_nodes),):
            raise ValueError("one sensitivity norm per DER expected")
        return self

    @property
    def n_nodes(self) -> int:
        return self.a_offset.shape[0]

    @property
    def no_load(self) -> np.ndarray:
        """No-load voltage profile w (the linearization point)."""
        return self.b_offset

    def xi(self, i: int) -> np.ndarray:
        """Row-stacked sensitivities of DER ``i`` (2 x M)."""
        return np.vstack([self.r_check[:, i], self.b_check[:, i]])

    def predict(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Linear voltage magnitudes on all non-slack nodes."""
        return self.a_offset + self.r_sens @ p + self.b_sens @ q


# ---------------------------------------------------------------------------
# Power flow
# ---------------------------------------------------------------------------

class InjectionProfile(BaseModel):
    """Net per-node injections s = p + jq (pu), loads counted negative."""
    model_config = ARRAY_MODEL

    p: np.ndarray
    q: np.ndarray

    @field_validator("p", "q", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _finite(frozen_array(value), "injection")

    @model_validator(mode="after")
    def _check_shapes(self) -> "InjectionProfile":
        if self.p.ndim != 1 or self.p.shape != self.q.shape:
            raise ValueError("p and q must be vectors of equal length")
        return self

    @property
    def s(self) -> np.ndarray:
        return self.p + 1j * self.q


class VoltageSolution(BaseModel):
    """Complex voltages of a (converged) power-flow solve."""
    model_config = ARRAY_MODEL

    v: np.ndarray
    magnitudes: np.ndarray
    converged: bool
    iterations: int = Field(ge=0)
    residual: float = Field(ge=0.0)

    @field_validator("v", mode="before")
    @classmethod
    def _coerce_v(cls, value: Any) -> np.ndarray:
        return frozen_array(value, complex)

    @field_validator("magnitudes", mode="before")
    @classmethod
    def _coerce_mag(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def _check_magnitudes(self) -> "VoltageSolution":
        if not np.allclose(np.abs(self.v), self.magnitudes, rtol=1e-9, atol=1e-12):
            raise ValueError("magnitudes must equal |v| entrywise")
        return self


# ---------------------------------------------------------------------------
# Optimization problem
# ---------------------------------------------------------------------------

class CapabilitySet(BaseModel):
    """Per-DER box-disk sets {P_min <= P <= P_av, P^2 + Q^2 <= S^2}."""
    model_config = ARRAY_MODEL

    p_min: np.ndarray
    p_av: np.ndarray
    rating: np.ndarray

    @field_validator("p_min", "p_av", "rating", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _finite(frozen_array(np.atleast_1d(value)), "capability")

    @model_validator(mode="after")
    def _check_shapes(self) -> "CapabilitySet":
        if not (self.p_min.shape == self.p_av.shape == self.rating.shape):
            raise ValueError("p_min, p_av and rating must have the same length")
        if np.any(self.rating <= 0.0):
            raise ValueError("ratings must be positive")
        return self

    @property
    def size(self) -> int:
        return self.rating.shape[0]

    @property
    def p_upper(self) -> np.ndarray:
        return np.minimum(self.p_av, self.rating)

    def is_empty(self) -> np.ndarray:
        return (self.p_min > self.p_upper) | (np.abs(self.p_min) > self.rating)

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        p, q = u[:, 0], u[:, 1]
        in_box = np.all(p >= self.p_min - tol) and np.all(p <= self.p_upper + tol)
        in_disk = np.all(p * p + q * q <= self.rating ** 2 * (1.0 + tol) + tol)
        return bool(in_box and in_disk)


class CostModel(BaseModel):
    """f_i(u_i) = c_q Q_i^2 + c_p (P_av,i - P_i)^2 per DER."""
    model_config = ARRAY_MODEL

    c_p: np.ndarray
    c_q: np.ndarray

    @field_validator("c_p", "c_q", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        arr = frozen_array(np.atleast_1d(value))
        if np.any(arr < 0.0):
            raise ValueError("cost coefficients must be nonnegative")
        return arr

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of the stacked cost gradient."""
        return 2.0 * float(max(np.max(self.c_p), np.max(self.c_q)))

    @property
    def strong_convexity(self) -> float:
        return 2.0 * float(min(np.min(self.c_p), np.min(self.c_q)))

    def value(self, u: np.ndarray, p_av: np.ndarray) -> np.ndarray:
        """Per-DER cost."""
        return self.c_q * u[:, 1] ** 2 + self.c_p * (p_av - u[:, 0]) ** 2

    def gradient(self, u: np.ndarray, p_av: np.ndarray) -> np.ndarray:
        return np.column_stack([-2.0 * self.c_p * (p_av - u[:, 0]), 2.0 * self.c_q * u[:, 1]])


class RegularizationParams(BaseModel):
    """Tikhonov weights, stepsize and dual-box radii."""
    model_config = ConfigDict(frozen=True)

    nu: float = Field(gt=0.0, description="Primal regularization weight")
    eps: float = Field(gt=0.0, description="Dual regularization weight")
    alpha: float = Field(ge=0.0, description="Stepsize; zero freezes the controller")
    d_gamma: float = Field(default=1e3, gt=0.0)
    d_mu: float = Field(default=1e3, gt=0.0)

    @property
    def eta(self) -> float:
        """Strong monotonicity constant of the saddle map."""
        return min(self.nu, self.eps)


class ProblemInstance(BaseModel):
    """Everything the optimization layer needs at one time instant k."""
    model_config = ARRAY_MODEL

    k: int = Field(ge=0)
    r_check: np.ndarray
    b_check: np.ndarray
    c: np.ndarray = Field(description="Constraint offsets on the monitored set")
    der_load_p: np.ndarray
    der_load_q: np.ndarray
    v_min: float = 0.95
    v_max: float = 1.05
    capability: CapabilitySet
    cost: CostModel
    params: RegularizationParams

    @field_validator("r_check", "b_check", "c", "der_load_p", "der_load_q", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _finite(frozen_array(value), "instance data")

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ProblemInstance":
        m, g = self.r_check.shape
        if self.b_check.shape != (m, g) or self.c.shape != (m,):
            raise ValueError("sensitivity slices and offsets disagree on M")
        for name in ("der_load_p", "der_load_q"):
            if getattr(self, name).shape != (g,):
                raise ValueError(f"{name} must have one entry per DER")
        if self.capability.size != g or self.cost.c_p.shape[0] not in (1, g):
            raise ValueError("capability/cost size must match the DER count")
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        return self

    @property
    def n_monitored(self) -> int:
        return self.r_check.shape[0]

    @property
    def n_der(self) -> int:
        return self.r_check.shape[1]

    def xi(self, i: int) -> np.ndarray:
        return np.vstack([self.r_check[:, i], self.b_check[:, i]])


class SaddlePoint(BaseModel):
    """Primal-dual optimizer of the regularized Lagrangian at one instant."""
    model_config = ARRAY_MODEL

    u: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    residual: float = Field(ge=0.0, description="Displacement of one projected step at z*")
    iterations: int = Field(ge=0)

    @field_validator("u", "gamma", "mu", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.gamma, self.mu])


# ---------------------------------------------------------------------------
# Controllers and channel
# ---------------------------------------------------------------------------

class ControllerState(BaseModel):
    """Aggregator duals, DER setpoints and the duals each DER last received."""
    model_config = ARRAY_MODEL

    u: np.ndarray = Field(description="Setpoints (P_i, Q_i), one row per DER")
    gamma: np.ndarray
    mu: np.ndarray
    gamma_copies: np.ndarray = Field(description="Stale gamma held by each DER (N_G x M)")
    mu_copies: np.ndarray
    last_delivery: np.ndarray = Field(description="Tick of each DER's last successful reception")
    k: int = Field(default=0, ge=0)

    @field_validator("u", "gamma", "mu", "gamma_copies", "mu_copies", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @field_validator("last_delivery", mode="before")
    @classmethod
    def _coerce_int(cls, value: Any) -> np.ndarray:
        return frozen_array(value, np.int64)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.gamma, self.mu])

    @property
    def staleness(self) -> np.ndarray:
        return self.k - self.last_delivery


class ChannelModel(BaseModel):
    """Lossy aggregator-to-DER broadcast with a hard cap on consecutive losses."""
    model_config = ARRAY_MODEL

    loss_prob: np.ndarray
    staleness_cap: np.ndarray
    seed: int = 0

    @field_validator("loss_prob", mode="before")
    @classmethod
    def _coerce_prob(cls, value: Any) -> np.ndarray:
        arr = frozen_array(np.atleast_1d(value))
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("loss probabilities must lie in [0, 1]")
        return arr

    @field_validator("staleness_cap", mode="before")
    @classmethod
    def _coerce_cap(cls, value: Any) -> np.ndarray:
        arr = frozen_array(np.atleast_1d(value), np.int64)
        if np.any(arr < 0):
            raise ValueError("staleness caps must be nonnegative")
        return arr

    @model_validator(mode="after")
    def _check_shapes(self) -> "ChannelModel":
        if self.loss_prob.shape != self.staleness_cap.shape:
            raise ValueError("one loss probability and one cap per DER expected")
        return self

    @property
    def size(self) -> int:
        return self.loss_prob.shape[0]


class StepRecord(BaseModel):
    """Everything observed and decided at one controller tick."""
    model_config = ARRAY_MODEL

    tick: int
    global_step: int
    is_global: bool
    policy: PolicyName
    setpoints: np.ndarray = Field(description="Setpoints applied to the plant at this tick")
    measurements: np.ndarray = Field(description="Monitored magnitudes fed to the controller")
    gamma: np.ndarray = Field(description="Aggregator gamma after the tick")
    mu: np.ndarray = Field(description="Aggregator mu after the tick")
    delivered: Optional[np.ndarray] = None
    staleness: np.ndarray
    stale_gradient_error: Optional[np.ndarray] = None
    mismatch: float = 0.0

    @field_validator("setpoints", "measurements", "gamma", "mu", "stale_gradient_error", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> Optional[np.ndarray]:
        return None if value is None else frozen_array(value)

    @field_validator("delivered", mode="before")
    @classmethod
    def _coerce_bool(cls, value: Any) -> Optional[np.ndarray]:
        return None if value is None else frozen_array(value, bool)

    @field_validator("staleness", mode="before")
    @classmethod
    def _coerce_int(cls, value: Any) -> np.ndarray:
        return frozen_array(value, np.int64)


# ---------------------------------------------------------------------------
# Analysis and scenario
# ---------------------------------------------------------------------------

class BoundsReport(BaseModel):
    """Evaluated constants of the convergence and tracking analysis."""
    model_config = ConfigDict(frozen=True)

    nu: float
    eps: float
    eta: float
    cost_lipschitz: float
    lipschitz: float = Field(description="Lipschitz constant of the saddle map")
    alpha: float
    alpha_max: float
    rho: float
    g_norm: float
    k_lower: float = Field(description="max |g| over the capability box hull")
    k_upper: float = Field(description="max |g_bar| over the capability box hull")
    sensitivity_norms: List[float]
    e_d: float
    lemma2_bounds: List[float]
    e_u: float
    e: float
    sigma_z: float = 0.0
    asymptotic_bound: Optional[float] = Field(default=None, description="None when rho >= 1")
    tracking_guaranteed: bool

    def flat(self) -> Dict[str, Any]:
        """Single-row representation for CSV export."""
        row: Dict[str, Any] = {}
        for key, value in self.model_dump().items():
            if isinstance(value, list):
                for i, item in enumerate(value):
                    row[f"{key}_{i}"] = item
            else:
                row[key] = value
        return row


class ScenarioTimeline(BaseModel):
    """Per-step loads and available DER power over the horizon."""
    model_config = ARRAY_MODEL

    horizon: int = Field(gt=0)
    tau: float = Field(default=1.0, gt=0.0)
    tau_fast: float = Field(default=0.1, gt=0.0)
    load_p: np.ndarray = Field(description="horizon x N real load (pu)")
    load_q: np.ndarray
    p_available: np.ndarray = Field(description="horizon x N_G available DER power (pu)")
    seed: int = 0

    @field_validator("load_p", "load_q", "p_available", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> np.ndarray:
        return _finite(frozen_array(value), "series")

    @model_validator(mode="after")
    def _check(self) -> "ScenarioTimeline":
        for name in ("load_p", "load_q", "p_available"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != self.horizon:
                raise ValueError(f"{name} must have {self.horizon} rows, got shape {arr.shape}")
        if self.load_p.shape != self.load_q.shape:
            raise ValueError("load_p and load_q disagree in shape")
        ratio = self.tau / self.tau_fast
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"tau_fast={self.tau_fast} does not divide tau={self.tau}")
        return self

    @property
    def fast_ratio(self) -> int:
        """Fast ticks per global period."""
        return int(round(self.tau / self.tau_fast))


class RunResult(BaseModel):
    """Recorded closed-loop run plus its analysis."""
    model_config = ARRAY_MODEL

    policy: PolicyName
    records: List[StepRecord]
    solutions: List[VoltageSolution]
    bounds: Optional[BoundsReport] = None
    saddle_points: List[SaddlePoint] = Field(default_factory=list)
    series: Dict[str, np.ndarray] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)

    @property
    def global_records(self) -> List[StepRecord]:
        return [r for r in self.records if r.is_global]

    @property
    def magnitudes(self) -> np.ndarray:
        """Ticks x N voltage magnitudes."""
        return np.vstack([s.magnitudes for s in self.solutions])


class LoopState(TypedDict, total=False):
    """
    Per-tick state flowing through the closed-loop graph.
    Each invocation covers one controller tick; history is kept by the simulator.
    """
    # Inputs
    tick: int
    global_step: int
    is_global: bool
    instance: ProblemInstance
    controller: ControllerState

    # Plant and sensors
    applied: ControllerState
    solution: VoltageSolution
    monitored_measurements: np.ndarray
    der_measurements: np.ndarray
    mismatch: float

    # Channel and oracle
    delivered: Optional[np.ndarray]
    saddle: Optional[SaddlePoint]

    # Outputs
    diagnostics: Dict[str, Any]
    record: StepRecord
    events: Annotated[List[str], operator.add]
