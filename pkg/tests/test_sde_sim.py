import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from ctgest.sde_sim import (
    CoarseGridWarning,
    IntensityParams,
    OuParams,
    ParameterError,
    RandomEnvParams,
    RngStream,
    TimeGrid,
    cosimulate_treatment,
    simulate_ctmc,
    simulate_ou,
    simulate_ou_random_env,
    simulate_treatment,
    stationary_draw,
)

SYM = np.array([[-1.0, 1.0], [1.0, -1.0]])


# --- grid -------------------------------------------------------------------


def test_grid_points_and_index():
    g = TimeGrid(0.0, 5.0, 0.01)
    assert g.n_steps == 500
    assert g.points[0] == 0.0 and g.points[-1] == pytest.approx(5.0)
    assert np.all(np.diff(g.points) > 0)
    assert g.index(3) == 300
    with pytest.raises(ParameterError):
        g.index(0.005)


@pytest.mark.parametrize("args", [(0.0, 1.0, 0.0), (0.0, 1.0, -0.1), (1.0, 1.0, 0.1), (0.0, 1.0, 0.3)])
def test_grid_rejects_bad_spacing(args):
    with pytest.raises(ParameterError):
        TimeGrid(*args)


@pytest.mark.parametrize("theta,sigma", [(0.0, 1.0), (-1.0, 1.0), (0.2, -1.0), (float("nan"), 1.0)])
def test_ou_params_validation(theta, sigma):
    with pytest.raises(ParameterError):
        OuParams(theta, sigma)


def test_env_validation():
    with pytest.raises(ParameterError):
        RandomEnvParams(np.array([[-1.0, 2.0], [1.0, -1.0]]), (OuParams(1, 1), OuParams(1, 1)))
    with pytest.raises(ParameterError):
        RandomEnvParams(SYM, (OuParams(1, 1),))
    with pytest.raises(ParameterError):
        RandomEnvParams(np.array([[1.0, -1.0], [1.0, -1.0]]), (OuParams(1, 1), OuParams(1, 1)))


# --- OU ---------------------------------------------------------------------


def test_ou_deterministic_decay():
    g = TimeGrid(0.0, 5.0, 0.01)
    e = simulate_ou(OuParams(0.2, 0.0), g, 1.0, RngStream(1))
    np.testing.assert_allclose(e, np.exp(-0.2 * g.points), rtol=1e-12)
    assert e[-1] == pytest.approx(0.3679, abs=1e-4)


def test_ou_stationary_sd_long_path():
    p = OuParams(0.2, 1.0)
    g = TimeGrid(0.0, 20000.0, 0.1)  # 2e5 points, ~ 4000 decorrelation times
    e = simulate_ou(p, g, stationary_draw(p, RngStream(3, 0)), RngStream(3, 1))
    assert np.std(e) == pytest.approx(1.5811, rel=0.05)


def test_ou_lag_autocorrelation():
    p = OuParams(0.2, 1.0)
    g = TimeGrid(0.0, 50000.0, 0.5)
    e = simulate_ou(p, g, stationary_draw(p, RngStream(4, 0)), RngStream(4, 1))
    e = e - e.mean()
    for s in (0.5, 2.0, 5.0):
        lag = int(round(s / g.step))
        rho = np.mean(e[:-lag] * e[lag:]) / np.var(e)
        # stationary AR(1) sample with 1e5 points: SE of rho around 0.02
        assert rho == pytest.approx(math.exp(-p.theta * s), abs=0.04)


def test_ou_exact_conditional_variance():
    p = OuParams(0.2, 1.0)
    g = TimeGrid(0.0, 2.0, 2.0)  # one coarse step; exactness does not depend on it
    gen = np.random.default_rng(0)
    ends = np.array([simulate_ou(p, g, 0.7, gen)[-1] for _ in range(20000)])
    var = 1.0 * (1 - math.exp(-2 * 0.2 * 2.0)) / (2 * 0.2)
    assert ends.mean() == pytest.approx(0.7 * math.exp(-0.4), abs=3 * math.sqrt(var / 20000))
    # sample variance SE ~ var * sqrt(2 / n)
    assert ends.var(ddof=1) == pytest.approx(var, abs=3 * var * math.sqrt(2 / 20000))


@pytest.mark.parametrize("theta,sigma,sd", [(0.2, 1.0, 1.5811), (0.5, 0.5, 0.5)])
def test_stationary_draw_sd(theta, sigma, sd):
    gen = np.random.default_rng(11)
    x = np.array([stationary_draw(OuParams(theta, sigma), gen) for _ in range(100000)])
    assert x.std() == pytest.approx(sd, rel=0.02)


def test_stationary_draw_zero_sigma():
    assert stationary_draw(OuParams(0.3, 0.0), RngStream(0)) == 0.0


@given(seed=st.integers(0, 2**64 - 1), stream=st.integers(0, 2**32))
@settings(max_examples=25, deadline=None)
def test_rng_stream_reproducible(seed, stream):
    g = TimeGrid(0.0, 1.0, 0.1)
    a = simulate_ou(OuParams(0.2, 1.0), g, 0.0, RngStream(seed, stream))
    b = simulate_ou(OuParams(0.2, 1.0), g, 0.0, RngStream(seed, stream))
    np.testing.assert_array_equal(a, b)


def test_streams_differ():
    g = TimeGrid(0.0, 1.0, 0.1)
    a = simulate_ou(OuParams(0.2, 1.0), g, 0.0, RngStream(5, 0))
    b = simulate_ou(OuParams(0.2, 1.0), g, 0.0, RngStream(5, 1))
    assert not np.array_equal(a, b)


# --- environment chain -------------------------------------------------------


def test_ctmc_occupation_symmetric():
    env = RandomEnvParams(SYM, (OuParams(0.2, 1.0), OuParams(1.0, 0.5)))
    g = TimeGrid(0.0, 5000.0, 0.1)
    j = simulate_ctmc(env, g, 0, RngStream(8))
    assert np.mean(j == 0) == pytest.approx(0.5, abs=0.02)
    np.testing.assert_allclose(env.stationary_distribution(), [0.5, 0.5])


def test_ctmc_asymmetric_stationary():
    gen_m = np.array([[-1.0, 1.0], [3.0, -3.0]])
    env = RandomEnvParams(gen_m, (OuParams(1, 1), OuParams(1, 1)))
    np.testing.assert_allclose(env.stationary_distribution(), [0.75, 0.25])
    j = simulate_ctmc(env, TimeGrid(0.0, 5000.0, 0.1), 1, RngStream(9))
    assert np.mean(j == 0) == pytest.approx(0.75, abs=0.02)


def test_ctmc_transition_matches_matrix_exponential():
    env = RandomEnvParams(SYM, (OuParams(1, 1), OuParams(1, 1)))
    g = TimeGrid(0.0, 20000.0, 0.1)
    j = simulate_ctmc(env, g, 0, RngStream(10))
    lag = 5  # t = 0.5
    p = expm(SYM * 0.5)
    start, end = j[:-lag], j[lag:]
    for s in (0, 1):
        emp = np.mean(end[start == s] == s)
        assert emp == pytest.approx(p[s, s], abs=0.02)


def test_ctmc_zero_generator_constant():
    env = RandomEnvParams(np.zeros((2, 2)), (OuParams(1, 1), OuParams(1, 1)))
    j = simulate_ctmc(env, TimeGrid(0.0, 10.0, 0.1), 1, RngStream(0))
    assert np.all(j == 1)


def test_ctmc_bad_initial_state():
    env = RandomEnvParams(SYM, (OuParams(1, 1), OuParams(1, 1)))
    with pytest.raises(ParameterError):
        simulate_ctmc(env, TimeGrid(0.0, 1.0, 0.1), 2, RngStream(0))


def test_random_env_single_regime_matches_plain_ou():
    p = OuParams(0.2, 1.0)
    env = RandomEnvParams(np.zeros((1, 1)), (p,))
    g = TimeGrid(0.0, 5.0, 0.01)
    a = simulate_ou_random_env(env, g, 0.3, RngStream(12, 4))
    b = simulate_ou(p, g, 0.3, RngStream(12, 4))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_random_env_sd_between_regimes():
    env = RandomEnvParams(SYM, (OuParams(0.2, 1.0), OuParams(1.0, 0.5)))
    g = TimeGrid(0.0, 20000.0, 0.1)
    e = simulate_ou_random_env(env, g, 0.0, RngStream(13))
    assert 0.3536 < e.std() < 1.5811


def test_random_env_noiseless_is_continuous_decay():
    env = RandomEnvParams(SYM, (OuParams(0.2, 0.0), OuParams(1.0, 0.0)))
    g = TimeGrid(0.0, 5.0, 0.01)
    e = simulate_ou_random_env(env, g, 2.0, RngStream(14), j0=0)
    ratio = e[1:] / e[:-1]
    # each step decays by one of the two regime factors; never a level jump
    allowed = np.array([math.exp(-0.2 * 0.01), math.exp(-1.0 * 0.01)])
    assert np.all(np.min(np.abs(ratio[:, None] - allowed), axis=1) < 1e-12)
    assert np.all(np.diff(e) < 0)


# --- treatment --------------------------------------------------------------


def test_zero_intensity_keeps_treatment():
    g = TimeGrid(0.0, 5.0, 0.01)
    a, n = simulate_treatment(lambda a, x: 0.0 * x, g, 1, np.zeros(g.n_points), RngStream(0))
    assert np.all(a == 1) and np.all(n == 0)


def test_constant_intensity_poisson_count():
    g = TimeGrid(0.0, 1.0, 0.01)
    u = np.random.default_rng(15).random((10000, g.n_steps))
    _, n = cosimulate_treatment(lambda j, a, c: np.full(a.shape, 2.8), g.n_steps, g.step, 0, u)
    counts = n[:, -1]
    # Bernoulli thinning with p = 0.028 per step: mean = 2.8 exactly
    assert np.mean(counts) == pytest.approx(2.8, rel=0.05)


def test_grid_refinement_changes_mean_count_little():
    gen = np.random.default_rng(16)
    means = []
    for step in (0.02, 0.01):
        g = TimeGrid(0.0, 1.0, step)
        cov = np.linspace(90, 110, g.n_points)
        f = IntensityParams()
        u = gen.random((200000, g.n_steps))
        _, n = cosimulate_treatment(lambda j, a, c: f(a, cov[j]), g.n_steps, g.step, 0, u)
        means.append(n[:, -1].mean())
    assert abs(means[0] - means[1]) / means[1] < 0.02


def test_appendix_intensity_value():
    assert IntensityParams()(0, 100.0) == pytest.approx(math.exp(-0.7), rel=1e-12)
    assert math.exp(-0.7) == pytest.approx(0.4966, abs=1e-4)


@given(seed=st.integers(0, 2**32), a0=st.integers(0, 1), rate=st.floats(0.0, 20.0))
@settings(max_examples=40, deadline=None)
def test_treatment_changes_only_at_jumps(seed, a0, rate):
    g = TimeGrid(0.0, 2.0, 0.05)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoarseGridWarning)
        a, n = simulate_treatment(lambda a, x: rate + 0 * x, g, a0, np.zeros(g.n_points), RngStream(seed))
    assert a[0] == a0 and n[0] == 0
    assert np.all(np.diff(n) >= 0)
    np.testing.assert_array_equal(np.diff(a) != 0, np.diff(n) == 1)
    assert np.all(np.isin(a, (0, 1)))


def test_coarse_grid_warns():
    g = TimeGrid(0.0, 1.0, 0.5)
    with pytest.warns(CoarseGridWarning):
        simulate_treatment(lambda a, x: 2.0 + 0 * x, g, 0, np.zeros(g.n_points), RngStream(0))


def test_negative_intensity_rejected():
    g = TimeGrid(0.0, 1.0, 0.1)
    with pytest.raises(ParameterError):
        simulate_treatment(lambda a, x: -1.0 + 0 * x, g, 0, np.zeros(g.n_points), RngStream(0))


def test_covariate_misaligned():
    g = TimeGrid(0.0, 1.0, 0.1)
    with pytest.raises(ParameterError):
        simulate_treatment(IntensityParams(), g, 0, np.zeros(5), RngStream(0))
