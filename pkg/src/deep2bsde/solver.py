"""Unrolled value/gradient recursion, terminal-mismatch loss, and training.

One training step: simulate a fresh path batch, roll the coupled
recursion forward on a new tape, take the mean squared mismatch between
the rolled-out terminal value and the terminal condition, run backward,
and apply one optimizer update.  The recursion reads the step-0
curvature and drift from direct parameter blocks and shares one network
pair across all later time steps, so gradients accumulate over the
whole unrolled horizon.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import nets
from .errors import ConfigurationError, DimensionError, NonFiniteError, RolloutDivergenceError
from .problems import ProblemSpec, relative_l1_error
from .sde import PathBatch, sample_brownian, simulate, uniform_grid

# stream tags for deriving independent per-purpose seeds from one run seed
_STREAM_INIT = 0
_STREAM_PATHS = 1


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class Schedule:
    """Step-indexed learning rate: constant, periodic exponential decay, or piecewise."""

    kind: str
    base: float = 0.0
    factor: float = 1.0
    period: int = 1
    pieces: tuple[tuple[int | None, float], ...] = ()

    def rate(self, m: int) -> float:
        if self.kind == "constant":
            return self.base
        if self.kind == "exp-decay":
            return self.base * self.factor ** (m // self.period)
        if self.kind == "piecewise":
            for bound, value in self.pieces:
                if bound is None or m < bound:
                    return value
            raise ConfigurationError("piecewise schedule has no terminal piece")
        raise ConfigurationError(f"unknown schedule kind {self.kind!r}")


NAMED_SCHEDULES = {
    "allen-cahn": Schedule("constant", base=1e-3),
    "hjb-multiscale": Schedule("exp-decay", base=0.01, factor=0.2, period=1000),
    "hjb-cnn": Schedule("piecewise", pieces=((1000, 0.01), (None, 0.005))),
    "bsb-multiscale": Schedule("exp-decay", base=1.0, factor=0.5, period=200),
    "bsb-cnn": Schedule("exp-decay", base=2.0, factor=0.5, period=500),
}


def named_schedule(name: str) -> Schedule:
    try:
        return NAMED_SCHEDULES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown schedule {name!r}; choose from {sorted(NAMED_SCHEDULES)}") from None


def lr_schedule(kind: str, m: int) -> float:
    """Learning rate of a named schedule at step m (decay exponents use floor)."""
    return named_schedule(kind).rate(m)


def schedule_from_config(value) -> Schedule:
    """Accept a named schedule or a {kind, ...} mapping."""
    if isinstance(value, Schedule):
        return value
    if isinstance(value, str):
        return named_schedule(value)
    if isinstance(value, dict):
        data = dict(value)
        if "pieces" in data:
            data["pieces"] = tuple((bound, float(v)) for bound, v in data["pieces"])
        return Schedule(**data)
    raise ConfigurationError(f"cannot interpret schedule {value!r}")


# ---------------------------------------------------------------------------
# configuration and state


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run; ``runs`` covers the repetition protocol."""

    steps: int
    schedule: Schedule
    batch_size: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = False
    eval_every: int = 1
    runs: int = 10
    time_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError("moment decay rates must lie strictly between 0 and 1")
        if self.eps <= 0.0:
            raise ConfigurationError("eps must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainState:
    """Trainable vector plus optimizer memory, step counter, and run seed.

    Per-step Brownian batches derive from (rng_seed, stream, step), a
    counter-style scheme: the state alone determines every future draw.
    """

    theta: np.ndarray
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int
    rng_seed: int


@dataclass(frozen=True)
class MetricsRow:
    run: int
    step: int
    u_estimate: float
    loss: float
    rel_l1_error: float | None
    seconds: float


@dataclass
class RolloutResult:
    """Terminal recursion state and the mean squared terminal mismatch."""

    y: object
    z: object
    loss: object
    loss_value: float
    residuals: np.ndarray | None = None


# ---------------------------------------------------------------------------
# rollout


class NetworkHeads:
    """Spatial approximations backed by the trainable architecture.

    At the first time step the direct parameter blocks stand in for the
    networks; afterwards one shared network pair is evaluated at every
    step, so the recursion's gradient accumulates across steps.  Because
    the weights are shared, ``prepare`` evaluates the networks once on
    the concatenated interior time points (step-major) and later calls
    slice out per-step results; the math is identical to per-step
    evaluation, just batched.
    """

    def __init__(self, spec: nets.ArchSpec, theta):
        self._eval = nets.evaluator(spec, theta)
        self._a_all = None
        self._g_all = None
        self._batch = 0

    def prepare(self, states: np.ndarray) -> None:
        j, n_plus_1, d = states.shape
        interior = n_plus_1 - 2  # time points 1 .. N-1
        self._batch = j
        if interior < 1:
            return
        flat = np.ascontiguousarray(
            states[:, 1:n_plus_1 - 1, :].transpose(1, 0, 2).reshape(interior * j, d))
        self._a_all = self._eval.grad_drift(flat)
        self._g_all = self._eval.hessian(flat)

    def initial_value(self):
        return self._eval.block("y0")

    def initial_gradient(self):
        return self._eval.block("z0")

    def hessian(self, n: int, t: float, x):
        if n == 0:
            return self._eval.block("g0")
        if self._g_all is None:
            return self._eval.hessian(x)
        return ad.rows(self._g_all, (n - 1) * self._batch, n * self._batch)

    def grad_drift(self, n: int, t: float, x):
        if n == 0:
            return self._eval.block("a0")
        if self._a_all is None:
            return self._eval.grad_drift(x)
        return ad.rows(self._a_all, (n - 1) * self._batch, n * self._batch)


@dataclass(frozen=True)
class ExactHeads:
    """Closed-form spatial inputs for the plug-in discretization oracle.

    Runs the same recursion with exact solution derivatives instead of
    networks, isolating the time-discretization error.
    """

    value0: float
    grad0: np.ndarray
    hessian_fn: Callable[[float, np.ndarray], np.ndarray]
    drift_fn: Callable[[float, np.ndarray], np.ndarray]

    def initial_value(self):
        return np.asarray(self.value0, dtype=np.float64)

    def initial_gradient(self):
        return np.asarray(self.grad0, dtype=np.float64)

    def hessian(self, n: int, t: float, x):
        return self.hessian_fn(t, x)

    def grad_drift(self, n: int, t: float, x):
        return self.drift_fn(t, x)


def _trace_term(sigma_sq_value: np.ndarray, gamma):
    """Trace(sigma sigma* Gamma) given the diagonal (J, d) or dense (J, d, d) of sigma sigma*."""
    ssq = np.asarray(sigma_sq_value, dtype=np.float64)
    if ssq.ndim == 2:
        return ad.diag_dot(gamma, ssq)
    if ssq.ndim == 3:
        # Trace(M G) = sum_ij G_ij M_ji
        return ad.sum(gamma * np.swapaxes(ssq, -1, -2), axis=(-2, -1))
    raise DimensionError(f"sigma_sq must return rank 2 or 3, got rank {ssq.ndim}")


def rollout(heads, problem: ProblemSpec, paths: PathBatch,
            keep_residuals: bool = False) -> RolloutResult:
    """Roll the coupled recursion to the horizon and score the terminal mismatch."""
    grid = paths.grid
    x = paths.states
    prepare = getattr(heads, "prepare", None)
    if prepare is not None:
        prepare(x)
    y = heads.initial_value()
    z = heads.initial_gradient()
    for n in range(grid.num_steps):
        xn = x[:, n, :]
        dx = x[:, n + 1, :] - xn
        tau = grid.tau[n]
        t = grid.t[n]
        try:
            gamma = heads.hessian(n, t, xn)
            drift = heads.grad_drift(n, t, xn)
            source = problem.f(t, xn, y, z, gamma) + _trace_term(problem.sigma_sq(xn), gamma) * 0.5
            y = y + ad.sum(z * dx, axis=-1) + source * tau
            z = z + drift * tau + ad.matvec(gamma, dx)
        except NonFiniteError as exc:
            raise RolloutDivergenceError(step=n, message=f"{exc} (time step {n})") from exc
        y_val = ad.value_of(y)
        if not np.all(np.isfinite(y_val)):
            bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(y_val)))[0])
            raise RolloutDivergenceError(step=n, sample=bad)
    residuals = y - problem.g(x[:, -1, :])
    loss = ad.mean(residuals * residuals)
    return RolloutResult(
        y=y,
        z=z,
        loss=loss,
        loss_value=float(ad.value_of(loss)),
        residuals=np.array(ad.value_of(residuals)) if keep_residuals else None,
    )


# ---------------------------------------------------------------------------
# optimizers


def power_abs(x: np.ndarray, exponent: float) -> np.ndarray:
    """Elementwise |x_i| ** exponent."""
    return np.abs(np.asarray(x, dtype=np.float64)) ** exponent


def sgd_step(state: TrainState, grad: np.ndarray, lr: float) -> TrainState:
    """Plain descent: theta <- theta - lr * grad; moments untouched."""
    return replace(state, theta=state.theta - lr * grad, step=state.step + 1)


def adam_step(state: TrainState, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              bias_correction: bool = False) -> TrainState:
    """Moment-tracked update, applied verbatim without bias correction.

    The reference formulation carries no warm-up correction of the moment
    estimates; ``bias_correction=True`` switches the standard correction
    on for comparison runs only.
    """
    first = beta1 * state.first_moment + (1.0 - beta1) * grad
    second = beta2 * state.second_moment + (1.0 - beta2) * grad * grad  # |g|^2 == g^2
    step = state.step + 1
    if bias_correction:
        first_used = first / (1.0 - beta1 ** step)
        second_used = second / (1.0 - beta2 ** step)
    else:
        first_used, second_used = first, second
    theta = state.theta - lr * first_used / (eps + np.sqrt(second_used))
    return replace(state, theta=theta, first_moment=first, second_moment=second, step=step)


def optimizer_step(state: TrainState, grad: np.ndarray, lr: float,
                   config: TrainConfig) -> TrainState:
    if config.optimizer == "sgd":
        return sgd_step(state, grad, lr)
    return adam_step(state, grad, lr, beta1=config.beta1, beta2=config.beta2,
                     eps=config.eps, bias_correction=config.bias_correction)


# ---------------------------------------------------------------------------
# training loop


def initial_state(arch: nets.ArchSpec, seed: int) -> TrainState:
    pv = nets.init_params(arch, (seed, _STREAM_INIT))
    nu = pv.size
    return TrainState(theta=pv.values, first_moment=np.zeros(nu),
                      second_moment=np.zeros(nu), step=0, rng_seed=seed)


def train(problem: ProblemSpec, arch: nets.ArchSpec, config: TrainConfig, seed: int,
          run_index: int = 0) -> Iterator[MetricsRow]:
    """Run one training realization, yielding metrics as they are produced.

    Each iteration simulates a fresh Brownian batch seeded by
    (seed, stream, step), so reruns with the same arguments reproduce the
    metric stream exactly (timing aside).  A row for step m reports the
    estimate held by theta after m updates and the batch loss at theta_m.
    """
    if arch.d != problem.d:
        raise ConfigurationError(f"architecture dimension {arch.d} != problem dimension {problem.d}")
    grid = uniform_grid(problem.horizon, config.time_steps or problem.default_steps)
    state = initial_state(arch, seed)
    start = time.perf_counter()
    for m in range(config.steps + 1):
        brownian = sample_brownian((seed, _STREAM_PATHS, m), config.batch_size, grid, problem.d)
        paths = simulate(problem, brownian)
        tape = ad.Tape()
        theta_t = tape.leaf(state.theta)
        heads = NetworkHeads(arch, theta_t)
        result = rollout(heads, problem, paths)
        if m % config.eval_every == 0 or m == config.steps:
            estimate = float(state.theta[0])
            rel = None
            if problem.reference is not None:
                rel = relative_l1_error(estimate, problem.reference)
            yield MetricsRow(run=run_index, step=m, u_estimate=estimate,
                             loss=result.loss_value, rel_l1_error=rel,
                             seconds=time.perf_counter() - start)
        if m == config.steps:
            break
        grad = ad.gradient(result.loss, theta_t)
        # updates are 1-indexed so decay boundaries land where the formulas say
        lr = config.schedule.rate(m + 1)
        state = optimizer_step(state, grad, lr, config)
