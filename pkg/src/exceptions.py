"""
Exception hierarchy for the feeder models, plant, controllers and analysis.
Every error raised on purpose by this package derives from OpfPursuitError.
"""

from typing import Optional


class OpfPursuitError(Exception):
    """Base class for all package errors."""


class FeederParseError(OpfPursuitError):
    """Malformed feeder file; carries the offending file and line."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = f"{path or '<feeder>'}:{line}" if line is not None else (path or "<feeder>")
        super().__init__(f"{location}: {message}")


class ModelConstructionError(OpfPursuitError):
    """Feeder cannot be turned into an admittance model (e.g. disconnected graph)."""


class DegenerateEdgeError(ModelConstructionError):
    """Branch with zero series impedance."""


class LinearizationError(OpfPursuitError):
    """Bus admittance matrix is singular or too ill-conditioned to linearize."""


class InputError(OpfPursuitError):
    """Missing or malformed numerical input (loads, setpoints, measurements)."""


class ConfigurationError(OpfPursuitError):
    """Parameters that make an operation undefined (empty capability set, DER not monitored...)."""


class ScenarioError(OpfPursuitError):
    """Scenario configuration or series files violate the schema."""

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class PowerFlowDivergedError(OpfPursuitError):
    """Fixed-point power flow did not reach the tolerance."""

    def __init__(self, residual: float, iterations: int, tick: Optional[int] = None):
        self.residual = residual
        self.iterations = iterations
        self.tick = tick
        where = f" at tick {tick}" if tick is not None else ""
        super().__init__(
            f"power flow diverged{where}: residual {residual:.3e} after {iterations} iterations"
        )

    def at_tick(self, tick: int) -> "PowerFlowDivergedError":
        return PowerFlowDivergedError(self.residual, self.iterations, tick)


class OracleError(OpfPursuitError):
    """Saddle-point oracle failed to certify a fixed point."""


class ControllerStepError(OpfPursuitError):
    """Controller step received inconsistent inputs or broke a state invariant."""


class DualBoxSaturationError(ControllerStepError):
    """A dual iterate reached its box radius, so the box is no longer inactive."""


class BoundViolationError(OpfPursuitError):
    """A runtime check of a theoretical bound failed."""


class TrajectoryMismatchError(OpfPursuitError):
    """Controller and oracle trajectories cannot be compared."""
