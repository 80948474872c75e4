"""Exception types shared across the package."""


class SolverError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SolverError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(SolverError):
    """A spec, grid, or run configuration is invalid."""


class UsageError(SolverError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class NonFiniteError(SolverError):
    """A primitive produced NaN or Inf."""


class SimulationDivergenceError(SolverError):
    """Forward path simulation produced a non-finite state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at time step {step}")


class RolloutDivergenceError(SolverError):
    """The Y/Z recursion produced a non-finite value."""

    def __init__(self, step: int, sample: int | None = None, message: str = ""):
        self.step = step
        self.sample = sample
        where = f"step {step}" + (f", sample {sample}" if sample is not None else "")
        super().__init__(message or f"non-finite rollout value at {where}")


class UndefinedMetricError(SolverError):
    """A metric is undefined for the given inputs (e.g. zero reference)."""
