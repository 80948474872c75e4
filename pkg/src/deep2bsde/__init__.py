"""Deep-learning solver for high-dimensional fully nonlinear parabolic PDEs.

The package approximates u(0, xi) by training neural networks on a
forward-discretized coupled system: simulated state paths drive an
unrolled recursion for the solution value and gradient, and the mean
squared mismatch against the terminal condition is the loss.
"""

from .errors import (
    ConfigurationError,
    DimensionError,
    NonFiniteError,
    RolloutDivergenceError,
    SimulationDivergenceError,
    SolverError,
    UndefinedMetricError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "NonFiniteError",
    "RolloutDivergenceError",
    "SimulationDivergenceError",
    "SolverError",
    "UndefinedMetricError",
    "UsageError",
    "__version__",
]
