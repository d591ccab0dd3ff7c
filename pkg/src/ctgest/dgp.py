"""Continuous-time data-generating processes M1-M4.

Every model shares the deterministic causal layer

    Y_t = Y0_t + psi * int_0^t A_s ds,    Y0_t = C + (noise process)

and a binary treatment whose flip intensity reads the concurrent outcome
(M1-M3) or the leading-indicator covariate plus regime rules (M4).

Subjects are simulated in batches: every subject draws its noise from its own
keyed stream in a fixed order, then the stepping runs vectorised across the
batch. A batch of one is therefore identical to a single-subject run.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .sde_sim import (
    IntensityParams,
    OuParams,
    ParameterError,
    RandomEnvParams,
    RngStream,
    TimeGrid,
    cosimulate_treatment,
    ctmc_jumps,
    draw_initial_state,
    ou_from_noise,
    ou_random_env_from_noise,
)

MODEL_IDS = ("M1", "M2", "M3", "M4")


@dataclass(frozen=True)
class CausalModel:
    psi: float = 1.0
    baseline_constant: float = 100.0

    def __post_init__(self):
        if not (np.isfinite(self.psi) and np.isfinite(self.baseline_constant)):
            raise ParameterError("causal parameters must be finite")


def default_env() -> RandomEnvParams:
    return RandomEnvParams(
        generator=np.array([[-1.0, 1.0], [1.0, -1.0]]),
        regimes=(OuParams(0.2, 1.0), OuParams(1.0, 0.5)),
    )


@dataclass(frozen=True)
class ModelConfig:
    model_id: str = "M1"
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.0, 5.0, 0.01))
    n_subjects: int = 5000
    causal: CausalModel = field(default_factory=CausalModel)
    ou: OuParams = field(default_factory=lambda: OuParams(0.2, 1.0))
    env: Optional[RandomEnvParams] = None
    intensity: IntensityParams = field(default_factory=IntensityParams)
    m4_high_threshold: float = 101.0
    m4_low_threshold: float = 99.0
    m4_regime_rate: float = 2.8
    m3_weights: tuple[float, float] = (0.8, 0.2)
    m4_mix: tuple[float, float, float] = (0.2, 0.8, 0.5)
    m4_noise: OuParams = field(default_factory=lambda: OuParams(0.2, 1.0))
    lead_time: float = 0.5
    m3_lag: float = 1.0
    # which process the M4 thresholds read ("y" or "l") and whether the
    # treatment value named with the 2.8 rate is the current or the target state
    m4_regime_on: str = "l"
    m4_regime_state: str = "current"

    def __post_init__(self):
        if self.model_id not in MODEL_IDS:
            raise ParameterError(f"unknown model {self.model_id!r}; expected one of {MODEL_IDS}")
        if self.n_subjects < 1:
            raise ParameterError("n_subjects must be >= 1")
        if self.model_id == "M2" and self.env is None:
            object.__setattr__(self, "env", default_env())
        if self.model_id == "M4":
            self.grid.steps_for(self.lead_time)
            if self.m4_low_threshold > self.m4_high_threshold:
                raise ParameterError("M4 low threshold above high threshold")
            if self.m4_regime_on not in ("y", "l"):
                raise ParameterError("m4_regime_on must be 'y' or 'l'")
            if self.m4_regime_state not in ("current", "target"):
                raise ParameterError("m4_regime_state must be 'current' or 'target'")
        if self.model_id == "M3":
            self.grid.steps_for(self.m3_lag)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class ContinuousPath:
    grid: TimeGrid
    y0: np.ndarray
    y: np.ndarray
    a: np.ndarray
    cum_a: np.ndarray
    jumps: np.ndarray
    l_minus: Optional[np.ndarray] = None


def integrate_treatment(a, grid: TimeGrid) -> np.ndarray:
    """Exact integral of the right-continuous step path ``a``.

    The value at grid point j covers [t_0, t_j) only, so a flip at t_j does
    not enter it. Computed as (treated-step count) * step, which keeps whole
    multiples of the step exact.
    """
    a = np.asarray(a)
    counts = np.zeros(a.shape, dtype=np.int64)
    counts[..., 1:] = np.cumsum(a[..., :-1], axis=-1)
    return counts * grid.step


def apply_effect(y0, cum_a, psi: float) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    cum_a = np.asarray(cum_a, dtype=float)
    if y0.shape != cum_a.shape:
        raise ValueError(f"y0 shape {y0.shape} does not match cum_a shape {cum_a.shape}")
    return y0 + psi * cum_a


# --------------------------------------------------------------------------
# noise draws, one subject at a time, in a fixed order


def _draw_noise(config: ModelConfig, gen: np.random.Generator) -> dict:
    grid = config.grid
    n = grid.n_steps
    mid = config.model_id
    out: dict = {}
    if mid == "M2":
        env = config.env
        j0 = draw_initial_state(env, gen)
        out["e0"] = env.regimes[j0].stationary_sd * gen.standard_normal()
        out["z"] = gen.standard_normal(n)
        times, states = ctmc_jumps(env, grid.t_end - grid.t_start, j0, gen)
        rel = grid.points - grid.t_start
        out["states"] = states[np.searchsorted(times, rel + 1e-12, side="right") - 1]
    elif mid == "M3":
        pre = grid.steps_for(config.m3_lag)
        out["e0"] = config.ou.stationary_sd * gen.standard_normal()
        out["z"] = gen.standard_normal(n + pre)
    elif mid == "M4":
        lead = grid.steps_for(config.lead_time)
        out["e0"] = config.ou.stationary_sd * gen.standard_normal()
        out["z"] = gen.standard_normal(n + lead)
        out["eta0"] = config.m4_noise.stationary_sd * gen.standard_normal()
        out["zeta"] = gen.standard_normal(n)
    else:
        out["e0"] = config.ou.stationary_sd * gen.standard_normal()
        out["z"] = gen.standard_normal(n)
    out["u0"] = gen.random()
    out["u"] = gen.random(n)
    return out


def _stack(bundles: list[dict]) -> dict:
    return {k: np.stack([np.asarray(b[k]) for b in bundles]) for k in bundles[0]}


def _baseline(config: ModelConfig, noise: dict) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Untreated outcome on the main grid and, for M4, its lead-extended version."""
    grid = config.grid
    c = config.causal.baseline_constant
    mid = config.model_id
    if mid == "M2":
        e = ou_random_env_from_noise(config.env, noise["states"], noise["e0"], noise["z"], grid.step)
        return c + e, None
    decay, sd = config.ou.transition(grid.step)
    e = ou_from_noise(noise["e0"], noise["z"], decay, sd)
    if mid == "M3":
        pre = grid.steps_for(config.m3_lag)
        w_lag, w_now = config.m3_weights
        # e lives on [t_start - lag, t_end]; index pre + j is time t_j
        return c + w_lag * e[..., : grid.n_points] + w_now * e[..., pre:], None
    if mid == "M4":
        return c + e[..., : grid.n_points], c + e
    return c + e, None


def _simulate_batch(config: ModelConfig, noise: dict) -> list[ContinuousPath]:
    grid = config.grid
    psi = config.causal.psi
    dt = grid.step
    y0, y0_ext = _baseline(config, noise)
    inten = config.intensity
    a0 = (noise["u0"] < expit(inten.alpha0 + inten.alpha2 * y0[..., 0])).astype(np.int8)

    l_minus = None
    if config.model_id == "M4":
        w_y, w_lead, w_eta = config.m4_mix
        lead = grid.steps_for(config.lead_time)
        decay, sd = config.m4_noise.transition(dt)
        eta = ou_from_noise(noise["eta0"], noise["zeta"], decay, sd)
        lead_y0 = y0_ext[..., lead : lead + grid.n_points]
        y_hist = np.empty_like(y0)
        l_minus = np.empty_like(y0)
        hi, lo, reg_rate = config.m4_high_threshold, config.m4_low_threshold, config.m4_regime_rate
        watch = y_hist if config.m4_regime_on == "y" else l_minus
        # state that the high / low regime acts on
        a_high, a_low = (1, 0) if config.m4_regime_state == "current" else (0, 1)

        def rate_fn(j, a, treated):
            y_now = y0[..., j] + psi * (treated * dt)
            y_hist[..., j] = y_now
            l_now = w_y * y_now + w_lead * lead_y0[..., j] + w_eta * eta[..., j]
            l_minus[..., j] = l_now
            rate = inten(a, l_now)
            if j >= lead:
                w_lag, w_now = watch[..., j - lead], watch[..., j]
                high = (w_lag > hi) & (w_now > hi) & (a == a_high)
                low = (w_lag < lo) & (w_now < lo) & (a == a_low)
                rate = np.where(high | low, reg_rate, rate)
            return rate
    else:

        def rate_fn(j, a, treated):
            return inten(a, y0[..., j] + psi * (treated * dt))

    a, jumps = cosimulate_treatment(rate_fn, grid.n_steps, dt, a0, noise["u"])
    cum_a = integrate_treatment(a, grid)
    y = apply_effect(y0, cum_a, psi)
    if l_minus is not None:
        # last point is never visited by the stepping loop
        l_minus[..., -1] = w_y * y[..., -1] + w_lead * lead_y0[..., -1] + w_eta * eta[..., -1]
    paths = []
    for i in range(y0.shape[0]):
        paths.append(
            ContinuousPath(
                grid=grid,
                y0=y0[i],
                y=y[i],
                a=a[i],
                cum_a=cum_a[i],
                jumps=jumps[i],
                l_minus=None if l_minus is None else l_minus[i],
            )
        )
    return paths


def generate_subject(config: ModelConfig, rng: RngStream) -> ContinuousPath:
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return _simulate_batch(config, _stack([_draw_noise(config, gen)]))[0]


def generate_dataset(config: ModelConfig, master_seed: int, n_subjects: Optional[int] = None) -> list[ContinuousPath]:
    """``n_subjects`` independent subjects; subject i uses stream i of ``master_seed``."""
    n = config.n_subjects if n_subjects is None else n_subjects
    if n < 1:
        raise ParameterError("need at least one subject")
    bundles = [_draw_noise(config, RngStream(master_seed, i).generator()) for i in range(n)]
    return _simulate_batch(config, _stack(bundles))
