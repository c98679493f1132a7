"""
Scenario configuration.

A scenario is a YAML file validated into SimulationSettings. Values can also come from
OPF_* environment variables (nested with "__", e.g. OPF_CONTROLLER__ALPHA=0.1); keys
present in the YAML file take precedence over the environment, and explicit overrides
(CLI flags) take precedence over both.
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.exceptions import ScenarioError
from src.state import PolicyName


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PowerFlowSettings(_Section):
    plant: Literal["nonlinear", "linear"] = "nonlinear"
    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=100, ge=1)


class ControllerSettings(_Section):
    policy: PolicyName = "feedback"
    alpha: Union[float, Literal["theory"]] = 0.2
    nu: float = Field(default=1e-3, gt=0.0)
    epsilon: float = Field(default=1e-4, gt=0.0)
    d_gamma: float = Field(default=1e3, gt=0.0)
    d_mu: float = Field(default=1e3, gt=0.0)
    c_p: float = Field(default=3.0, ge=0.0)
    c_q: float = Field(default=1.0, ge=0.0)
    tau: float = Field(default=1.0, gt=0.0)
    tau_fast: float = Field(default=0.1, gt=0.0)
    v_min: float = 0.95
    v_max: float = 1.05
    voltvar_deadband: float = Field(default=1.0, description="Voltage where droop absorption starts")
    voltvar_saturation: float = Field(default=1.05, description="Voltage of full absorption")

    @field_validator("alpha")
    @classmethod
    def _nonnegative_alpha(cls, value: Union[float, str]) -> Union[float, str]:
        if isinstance(value, float) and value < 0.0:
            raise ValueError("alpha must be nonnegative")
        return value

    @model_validator(mode="after")
    def _check_limits(self) -> "ControllerSettings":
        if self.v_min >= self.v_max:
            raise ValueError("v_min must be below v_max")
        if self.voltvar_saturation <= self.voltvar_deadband:
            raise ValueError("voltvar_saturation must exceed voltvar_deadband")
        return self


class ChannelSettings(_Section):
    p_loss: Union[float, List[float]] = 0.0
    e_max: Union[int, List[int]] = 9
    channel_seed: int = 0


class SensorSettings(_Section):
    noise_bound: float = Field(default=0.0, ge=0.0)
    measurement_seed: int = 0


class SeriesSettings(_Section):
    """Either CSV files or the parameters of the synthetic generator."""
    horizon: int = Field(default=600, gt=0)
    load_file: Optional[str] = None
    pv_file: Optional[str] = None
    seed: int = 0
    load_scale: float = Field(default=0.35, ge=0.0)
    load_diurnal_amplitude: float = Field(default=0.1, ge=0.0)
    load_walk_sigma: float = Field(default=0.01, ge=0.0)
    load_walk_bound: float = Field(default=0.1, ge=0.0)
    irradiance_floor: float = Field(default=0.45, ge=0.0, le=1.0)
    irradiance_peak: float = Field(default=0.97, ge=0.0, le=1.0)
    peak_step: Optional[float] = Field(default=None, description="Defaults to 0.58 * horizon")
    peak_width: Optional[float] = Field(default=None, description="Defaults to 0.15 * horizon")
    cloud_walk_sigma: float = Field(default=0.004, ge=0.0)
    cloud_walk_bound: float = Field(default=0.03, ge=0.0)


class AnalysisSettings(_Section):
    enabled: bool = True
    oracle_tol: float = Field(default=1e-10, gt=0.0)
    oracle_max_iter: int = Field(default=200_000, ge=1)
    burn_in_factor: float = Field(default=5.0, ge=0.0)
    window_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    enforce_bounds: bool = True
    settle_steps: int = Field(default=60, ge=0, description="Steps excluded from steady-state voltage and cost statistics")
    trace_node: Optional[str] = Field(default=None, description="Node whose voltage smoothness is reported; defaults to the last monitored node")


class OutputSettings(_Section):
    out_dir: str = "runs/latest"


class SimulationSettings(BaseSettings):
    """Root of the scenario schema."""
    model_config = SettingsConfigDict(
        env_prefix="OPF_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    name: str = "scenario"
    feeder_file: str
    monitored: Optional[List[str]] = Field(
        default=None, description="Monitored node names; defaults to the feeder file's monitor record"
    )
    powerflow: PowerFlowSettings = Field(default_factory=PowerFlowSettings)
    controller: ControllerSettings = Field(default_factory=ControllerSettings)
    channel: ChannelSettings = Field(default_factory=ChannelSettings)
    sensors: SensorSettings = Field(default_factory=SensorSettings)
    series: SeriesSettings = Field(default_factory=SeriesSettings)
    analysis: AnalysisSettings = Field(default_factory=AnalysisSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    base_dir: str = Field(default=".", description="Directory relative paths resolve against")

    @model_validator(mode="after")
    def _check_timing(self) -> "SimulationSettings":
        ratio = self.controller.tau / self.controller.tau_fast
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"tau_fast={self.controller.tau_fast} does not divide tau={self.controller.tau}"
            )
        return self

    @property
    def fast_ratio(self) -> int:
        return int(round(self.controller.tau / self.controller.tau_fast))

    def resolve(self, path: str) -> Path:
        """Resolve a path from the config relative to the config's directory."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else Path(self.base_dir) / candidate

    @classmethod
    def from_yaml(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> "SimulationSettings":
        """
        Load and validate a scenario file.

        Args:
            path: YAML scenario file
            overrides: Dotted-key overrides, e.g. {"controller.policy": "voltvar"}

        Returns:
            Validated settings

        Raises:
            ScenarioError: unreadable file or schema violation, with the offending location
        """
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ScenarioError(str(e), location=str(path)) from e
        if not isinstance(data, dict):
            raise ScenarioError("top level must be a mapping", location=str(path))

        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            target = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                target = target.setdefault(key, {})
            target[leaf] = value
        data.setdefault("base_dir", str(path.parent))

        try:
            return cls(**data)
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(part) for part in first["loc"])
            raise ScenarioError(first["msg"], location=f"{path}:{loc}") from e
