"""Time grids, Brownian increment sampling, and forward path simulation.

Seeds may be ints or tuples of ints; tuples feed ``numpy.random.SeedSequence``
directly, which gives a counter-style scheme for deriving independent
per-step streams from a run seed without threading generator state around.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, SimulationDivergenceError

SeedLike = int | tuple[int, ...] | np.random.SeedSequence


@dataclass(frozen=True)
class TimeGrid:
    """Partition 0 = t_0 < ... < t_N = T with step sizes tau_j = t_j - t_{j-1}."""

    t: np.ndarray
    tau: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.tau.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.t[-1])


@dataclass(frozen=True)
class BrownianBatch:
    """Brownian increments for a mini-batch: (J, N, d), entry ~ N(0, tau_{n+1})."""

    increments: np.ndarray
    grid: TimeGrid
    seed: SeedLike | None

    @property
    def batch_size(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]


@dataclass(frozen=True)
class PathBatch:
    """Simulated forward states: (J, N+1, d) with states[:, 0] = xi."""

    states: np.ndarray
    brownian: BrownianBatch

    @property
    def grid(self) -> TimeGrid:
        return self.brownian.grid


def uniform_grid(horizon: float, num_steps: int) -> TimeGrid:
    """Equally spaced grid t_n = n T / N."""
    if num_steps < 1:
        raise ConfigurationError(f"need at least one time step, got {num_steps}")
    if horizon <= 0.0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    t = np.linspace(0.0, horizon, num_steps + 1)
    return TimeGrid(t=t, tau=np.diff(t))


def sample_brownian(seed: SeedLike, batch_size: int, grid: TimeGrid, dim: int) -> BrownianBatch:
    """Draw i.i.d. increments W_{t_{n+1}} - W_{t_n} ~ N(0, tau_{n+1} I_d)."""
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((batch_size, grid.num_steps, dim))
    normals *= np.sqrt(grid.tau)[None, :, None]
    return BrownianBatch(increments=normals, grid=grid, seed=seed)


def simulate(problem, brownian: BrownianBatch) -> PathBatch:
    """Roll the transition map X_{n+1} = H(t_n, t_{n+1}, X_n, dW_n) forward."""
    grid = brownian.grid
    j, n_steps, dim = brownian.increments.shape
    states = np.empty((j, n_steps + 1, dim))
    states[:, 0, :] = np.asarray(problem.xi, dtype=np.float64)
    for n in range(n_steps):
        states[:, n + 1, :] = problem.transition(
            grid.t[n], grid.t[n + 1], states[:, n, :], brownian.increments[:, n, :]
        )
        if not np.all(np.isfinite(states[:, n + 1, :])):
            raise SimulationDivergenceError(step=n + 1)
    return PathBatch(states=states, brownian=brownian)


def refine_brownian(brownian: BrownianBatch, factor: int) -> BrownianBatch:
    """Coarsen increments by summing groups of ``factor`` consecutive steps.

    Used to compare discretizations of the same underlying Brownian path:
    sample once at the finest grid, then aggregate for coarser ones.
    """
    inc = brownian.increments
    j, n_fine, dim = inc.shape
    if n_fine % factor != 0:
        raise ConfigurationError(f"{n_fine} fine steps not divisible by factor {factor}")
    n_coarse = n_fine // factor
    coarse = inc.reshape(j, n_coarse, factor, dim).sum(axis=2)
    grid = TimeGrid(t=brownian.grid.t[::factor].copy(),
                    tau=brownian.grid.tau.reshape(n_coarse, factor).sum(axis=1))
    return BrownianBatch(increments=coarse, grid=grid, seed=brownian.seed)


def dump_paths(paths: PathBatch, path: str) -> None:
    """Debug CSV of simulated states, one row per (sample, time) pair."""
    j, n_plus_1, dim = paths.states.shape
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["path_j", "n"] + [f"x_{i}" for i in range(dim)])
        for sample in range(j):
            for n in range(n_plus_1):
                writer.writerow([sample, n] + [repr(v) for v in paths.states[sample, n]])
