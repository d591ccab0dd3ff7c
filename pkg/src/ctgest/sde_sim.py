"""Continuous-time stochastic building blocks on a fine time grid.

Ornstein-Uhlenbeck paths use the exact Gaussian transition, the environment
chain is sampled exactly in continuous time and then projected onto the grid,
and binary treatment paths are produced by Bernoulli thinning of a flip
intensity, one possible flip per grid step.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.signal import lfilter


class ParameterError(ValueError):
    """Invalid simulation parameters or grid."""


class CoarseGridWarning(UserWarning):
    """Flip probability per step is large enough that the grid is too coarse."""


_GRID_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    step: float

    def __post_init__(self):
        if not (self.step > 0 and math.isfinite(self.step)):
            raise ParameterError(f"grid step must be positive, got {self.step}")
        if not self.t_end > self.t_start:
            raise ParameterError("grid needs t_end > t_start")
        ratio = (self.t_end - self.t_start) / self.step
        if abs(ratio - round(ratio)) > _GRID_TOL * max(1.0, ratio):
            raise ParameterError(
                f"(t_end - t_start) / step = {ratio} is not a whole number"
            )

    @property
    def n_steps(self) -> int:
        return int(round((self.t_end - self.t_start) / self.step))

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def points(self) -> np.ndarray:
        return self.t_start + self.step * np.arange(self.n_points)

    def index(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a grid point."""
        pos = (t - self.t_start) / self.step
        j = int(round(pos))
        if abs(pos - j) > 1e-6 or j < 0 or j > self.n_steps:
            raise ParameterError(f"time {t} is not on the grid {self}")
        return j

    def steps_for(self, duration: float) -> int:
        """Number of grid steps spanning ``duration``; must be a whole number."""
        pos = duration / self.step
        j = int(round(pos))
        if abs(pos - j) > 1e-6:
            raise ParameterError(f"duration {duration} is not a multiple of step {self.step}")
        return j

    def extended(self, before: float = 0.0, after: float = 0.0) -> "TimeGrid":
        return TimeGrid(
            self.t_start - self.steps_for(before) * self.step,
            self.t_end + self.steps_for(after) * self.step,
            self.step,
        )


@dataclass(frozen=True)
class OuParams:
    theta: float
    sigma: float

    def __post_init__(self):
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise ParameterError(f"OU theta must be > 0, got {self.theta}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ParameterError(f"OU sigma must be >= 0, got {self.sigma}")

    @property
    def stationary_sd(self) -> float:
        return self.sigma / math.sqrt(2.0 * self.theta)

    def transition(self, dt: float) -> tuple[float, float]:
        """(decay factor, conditional SD) of the exact transition over ``dt``."""
        decay = math.exp(-self.theta * dt)
        sd = self.sigma * math.sqrt(-math.expm1(-2.0 * self.theta * dt) / (2.0 * self.theta))
        return decay, sd


@dataclass(frozen=True, eq=False)
class RandomEnvParams:
    generator: np.ndarray
    regimes: tuple[OuParams, ...]

    def __eq__(self, other):
        if not isinstance(other, RandomEnvParams):
            return NotImplemented
        return self.regimes == other.regimes and np.array_equal(self.generator, other.generator)

    def __hash__(self):
        return hash((self.generator.tobytes(), self.generator.shape, self.regimes))

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.generator, dtype=float))
        object.__setattr__(self, "generator", g)
        object.__setattr__(self, "regimes", tuple(self.regimes))
        m = g.shape[0]
        if g.shape != (m, m):
            raise ParameterError("generator must be square")
        if len(self.regimes) != m:
            raise ParameterError(f"{len(self.regimes)} regimes for a {m}-state generator")
        off = g - np.diag(np.diag(g))
        if np.any(off < 0):
            raise ParameterError("generator off-diagonal entries must be >= 0")
        if not np.allclose(g.sum(axis=1), 0.0, atol=1e-12):
            raise ParameterError("generator rows must sum to zero")

    @property
    def n_states(self) -> int:
        return self.generator.shape[0]

    def stationary_distribution(self) -> np.ndarray:
        """Left null vector of the generator, normalised to sum to one."""
        m = self.n_states
        if m == 1:
            return np.ones(1)
        lhs = np.vstack([self.generator.T, np.ones(m)])
        rhs = np.zeros(m + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


@dataclass(frozen=True)
class IntensityParams:
    """Log-linear flip intensity exp(a0 + a1*A + a2*X + a3*A*X)."""

    alpha0: float = -0.2
    alpha1: float = -0.3
    alpha2: float = -0.005
    alpha3: float = 0.007

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "alpha2", "alpha3"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterError(f"{name} must be finite")

    def __call__(self, a, x):
        a = np.asarray(a, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.exp(self.alpha0 + self.alpha1 * a + self.alpha2 * x + self.alpha3 * a * x)


@dataclass(frozen=True)
class RngStream:
    """Keyed random stream; the same (seed, stream_id) always gives the same draws."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise ParameterError(f"{name} must be a 64-bit unsigned integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def derive_seed(*keys: int) -> int:
    """Collapse integer keys (e.g. master seed, replication index) into one 64-bit seed."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------
# Ornstein-Uhlenbeck


def ou_from_noise(e0, z, decay: float, sd: float) -> np.ndarray:
    """Run the AR(1) recursion e[j+1] = decay*e[j] + sd*z[j] along the last axis.

    ``z`` holds one standard normal per step; the result has one more point.
    Works on batches: ``e0`` of shape (n,) with ``z`` of shape (n, steps).
    """
    z = np.asarray(z, dtype=float)
    e0 = np.asarray(e0, dtype=float)
    x = np.concatenate([e0[..., None], sd * z], axis=-1)
    return lfilter([1.0], [1.0, -decay], x, axis=-1)


def stationary_draw(params: OuParams, rng: RngLike) -> float:
    """One draw from the OU stationary law N(0, sd = sigma/sqrt(2 theta))."""
    gen = as_generator(rng)
    return float(params.stationary_sd * gen.standard_normal())


def simulate_ou(params: OuParams, grid: TimeGrid, e0: float, rng: RngLike) -> np.ndarray:
    gen = as_generator(rng)
    z = gen.standard_normal(grid.n_steps)
    decay, sd = params.transition(grid.step)
    return ou_from_noise(e0, z, decay, sd)


# --------------------------------------------------------------------------
# environment chain


def ctmc_jumps(env: RandomEnvParams, horizon: float, j0: int, gen: np.random.Generator):
    """Exact jump times and visited states of the chain on [0, horizon]."""
    g = env.generator
    times = [0.0]
    states = [int(j0)]
    t, j = 0.0, int(j0)
    while True:
        rate = -g[j, j]
        if rate <= 0:
            break
        t += gen.exponential(1.0 / rate)
        if t > horizon:
            break
        probs = g[j].copy()
        probs[j] = 0.0
        j = int(gen.choice(env.n_states, p=probs / rate))
        times.append(t)
        states.append(j)
    return np.asarray(times), np.asarray(states)


def simulate_ctmc(env: RandomEnvParams, grid: TimeGrid, j0: int, rng: RngLike) -> np.ndarray:
    """Environment state at every grid point (right-continuous projection)."""
    if not 0 <= int(j0) < env.n_states:
        raise ParameterError(f"initial state {j0} outside 0..{env.n_states - 1}")
    gen = as_generator(rng)
    times, states = ctmc_jumps(env, grid.t_end - grid.t_start, j0, gen)
    rel = grid.points - grid.t_start
    # a jump landing within rounding of a grid point counts at that point
    idx = np.searchsorted(times, rel + 1e-12, side="right") - 1
    return states[idx]


def simulate_ou_random_env(
    env: RandomEnvParams,
    grid: TimeGrid,
    e0: float,
    rng: RngLike,
    j0: int | None = None,
) -> np.ndarray:
    """OU whose (theta, sigma) follow the environment chain.

    Each grid step uses the regime in force at its left end; the level is
    carried across switches. Normals are drawn before the chain, so a
    one-regime environment reproduces :func:`simulate_ou` draw for draw.
    ``j0=None`` draws the starting regime from the stationary distribution.
    """
    gen = as_generator(rng)
    z = gen.standard_normal(grid.n_steps)
    if j0 is None:
        j0 = draw_initial_state(env, gen)
    states = simulate_ctmc(env, grid, j0, gen)
    return ou_random_env_from_noise(env, states, e0, z, grid.step)


def draw_initial_state(env: RandomEnvParams, gen: np.random.Generator) -> int:
    if env.n_states == 1:
        return 0
    return int(gen.choice(env.n_states, p=env.stationary_distribution()))


def ou_random_env_from_noise(env: RandomEnvParams, states, e0, z, dt: float) -> np.ndarray:
    """Batch-capable piecewise OU given projected regime paths and step normals."""
    states = np.asarray(states)
    z = np.asarray(z, dtype=float)
    trans = np.array([r.transition(dt) for r in env.regimes])
    decay = trans[states[..., :-1], 0]
    sd = trans[states[..., :-1], 1]
    out = np.empty(z.shape[:-1] + (z.shape[-1] + 1,))
    out[..., 0] = e0
    for j in range(z.shape[-1]):
        out[..., j + 1] = decay[..., j] * out[..., j] + sd[..., j] * z[..., j]
    return out


# --------------------------------------------------------------------------
# treatment process

RateFn = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def cosimulate_treatment(rate_fn: RateFn, n_steps: int, dt: float, a0, uniforms) -> tuple[np.ndarray, np.ndarray]:
    """Thinning loop shared by every treatment simulator.

    ``rate_fn(j, a_j, count_j)`` returns the flip intensity during step j given
    the current treatment and the number of treated steps so far (so callers
    can rebuild outcomes that depend on cumulative treatment). Batch shape is
    the leading shape of ``uniforms`` (.., n_steps).
    Returns the treatment path and the running jump count, both with
    ``n_steps + 1`` points.
    """
    u = np.asarray(uniforms, dtype=float)
    batch = u.shape[:-1]
    a = np.empty(batch + (n_steps + 1,), dtype=np.int8)
    jumps = np.zeros(batch + (n_steps + 1,), dtype=np.int64)
    a[..., 0] = a0
    treated = np.zeros(batch, dtype=np.int64)
    warned = False
    for j in range(n_steps):
        aj = a[..., j]
        rate = np.asarray(rate_fn(j, aj, treated), dtype=float)
        if np.any(rate < 0) or not np.all(np.isfinite(rate)):
            raise ParameterError("treatment intensity must be finite and non-negative")
        prob = rate * dt
        if not warned and np.any(prob > 0.5):
            warnings.warn(
                f"flip probability {prob.max():.3f} per step exceeds 0.5; grid too coarse",
                CoarseGridWarning,
                stacklevel=2,
            )
            warned = True
        flip = u[..., j] < np.minimum(prob, 1.0)
        a[..., j + 1] = np.where(flip, 1 - aj, aj)
        jumps[..., j + 1] = jumps[..., j] + flip
        treated = treated + aj
    return a, jumps


def simulate_treatment(
    intensity: Callable,
    grid: TimeGrid,
    a0: int,
    covariate_path: Sequence[float],
    rng: RngLike,
) -> tuple[np.ndarray, np.ndarray]:
    """Binary treatment driven by ``intensity(a, covariate)`` along a fixed covariate path."""
    cov = np.asarray(covariate_path, dtype=float)
    if cov.shape[-1] != grid.n_points:
        raise ParameterError(f"covariate path has {cov.shape[-1]} points, grid has {grid.n_points}")
    gen = as_generator(rng)
    u = gen.random(grid.n_steps)
    return cosimulate_treatment(lambda j, a, _: intensity(a, cov[..., j]), grid.n_steps, grid.step, a0, u)
