import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctgest.dgp import (
    CausalModel,
    ModelConfig,
    apply_effect,
    generate_dataset,
    generate_subject,
    integrate_treatment,
)
from ctgest.sde_sim import IntensityParams, OuParams, ParameterError, RngStream, TimeGrid, cosimulate_treatment

GRID = TimeGrid(0.0, 5.0, 0.01)


def _visits(paths, idx):
    return np.stack([p.y0[idx] for p in paths])


def _partial_corr(y):
    """Partial correlation of columns 0 and 2 given column 1."""
    prec = np.linalg.inv(np.cov(y.T))
    return -prec[0, 2] / np.sqrt(prec[0, 0] * prec[2, 2])


# --- effect and integral ------------------------------------------------------


def test_apply_effect_examples():
    y0 = np.full(GRID.n_points, 100.0)
    cum = integrate_treatment(np.ones(GRID.n_points, dtype=int), GRID)
    assert apply_effect(y0, cum, 1.0)[-1] == pytest.approx(105.0)
    np.testing.assert_array_equal(apply_effect(y0, cum, 0.0), y0)
    half = GRID.points / 2
    assert (apply_effect(y0, half, 1.0) - y0)[GRID.index(4)] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        apply_effect(y0, cum[:-1], 1.0)


def test_integrate_treatment_examples():
    g = TimeGrid(0.0, 2.0, 0.01)
    ones = np.ones(g.n_points, dtype=int)
    assert integrate_treatment(ones, g)[g.index(1)] == 1.0
    assert np.all(integrate_treatment(np.zeros(g.n_points, dtype=int), g) == 0)
    a = (g.points < 0.5 - 1e-9).astype(int)
    assert integrate_treatment(a, g)[-1] == pytest.approx(0.5, abs=1e-12)


def test_integral_excludes_flip_at_grid_point():
    g = TimeGrid(0.0, 1.0, 0.1)
    a = np.zeros(g.n_points, dtype=int)
    a[5:] = 1  # switched on at t = 0.5
    cum = integrate_treatment(a, g)
    assert cum[5] == 0.0
    assert cum[6] == pytest.approx(0.1)


# --- generation -------------------------------------------------------------


def test_noise_off_gives_constant():
    cfg = ModelConfig(
        "M1",
        ou=OuParams(0.2, 0.0),
        causal=CausalModel(psi=0.0),
        intensity=IntensityParams(-1e3, 0.0, 0.0, 0.0),
        n_subjects=3,
    )
    for p in generate_dataset(cfg, 0):
        assert np.all(p.y == 100.0) and np.all(p.a == 0)


@pytest.mark.parametrize("model_id", ["M1", "M2", "M3", "M4"])
def test_consistency_identity_exact(model_id):
    cfg = ModelConfig(model_id, n_subjects=20)
    for p in generate_dataset(cfg, 3):
        np.testing.assert_array_equal(p.y, p.y0 + cfg.causal.psi * p.cum_a)
        np.testing.assert_array_equal(np.diff(p.a) != 0, np.diff(p.jumps) == 1)


@given(seed=st.integers(0, 2**63), model_id=st.sampled_from(["M1", "M2", "M3", "M4"]))
@settings(max_examples=12, deadline=None)
def test_dataset_deterministic(seed, model_id):
    cfg = ModelConfig(model_id, n_subjects=2)
    a, b = generate_dataset(cfg, seed), generate_dataset(cfg, seed)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.y, q.y)
        np.testing.assert_array_equal(p.a, q.a)


def test_single_subject_matches_generate_subject():
    cfg = ModelConfig("M2", n_subjects=1)
    p = generate_dataset(cfg, 17)[0]
    q = generate_subject(cfg, RngStream(17, 0))
    np.testing.assert_array_equal(p.y, q.y)
    np.testing.assert_array_equal(p.a, q.a)


def test_subject_does_not_depend_on_dataset_size():
    cfg = ModelConfig("M1")
    small = generate_dataset(cfg, 5, n_subjects=3)
    big = generate_dataset(cfg, 5, n_subjects=10)
    for p, q in zip(small, big):
        np.testing.assert_array_equal(p.y, q.y)


def test_m1_marginal_sd():
    paths = generate_dataset(ModelConfig("M1"), 21, n_subjects=10000)
    y0 = np.array([p.y0[-1] for p in paths]) - 100.0
    assert y0.std() == pytest.approx(1.5811, rel=0.05)


def test_treatment_regenerated_from_stored_outcome():
    """M1 flips depend only on (A_t, Y_t): replaying the stored Y with the same uniforms reproduces A."""
    cfg = ModelConfig("M1", n_subjects=1)
    gen = RngStream(9, 0).generator()
    _ = cfg.ou.stationary_sd * gen.standard_normal()
    _ = gen.standard_normal(GRID.n_steps)
    u0, u = gen.random(), gen.random(GRID.n_steps)
    path = generate_subject(cfg, RngStream(9, 0))
    inten = cfg.intensity
    a0 = int(u0 < 1 / (1 + np.exp(-(inten.alpha0 + inten.alpha2 * path.y[0]))))
    a, _ = cosimulate_treatment(lambda j, a, c: inten(a, path.y[j]), GRID.n_steps, GRID.step, a0, u)
    np.testing.assert_array_equal(a, path.a)


def test_m3_is_not_markov():
    paths = generate_dataset(ModelConfig("M3"), 0, n_subjects=10000)
    y = _visits(paths, [100, 200, 300])
    c = np.corrcoef(y.T)
    # for a Gaussian Markov process corr(t, t+2) = corr(t, t+1) corr(t+1, t+2)
    assert abs(c[0, 2] - c[0, 1] * c[1, 2]) > 0.03
    assert abs(_partial_corr(y)) > 0.1
    m1 = _visits(generate_dataset(ModelConfig("M1"), 0, n_subjects=10000), [100, 200, 300])
    assert abs(_partial_corr(m1)) < 0.05


def test_m4_covariate_leads_outcome():
    paths = generate_dataset(ModelConfig("M4"), 1, n_subjects=10000)
    t = GRID.index(2)
    lt = np.array([p.l_minus[t] for p in paths])
    near = np.array([p.y0[t + 50] for p in paths])
    far = np.array([p.y0[t + 150] for p in paths])
    assert np.corrcoef(lt, near)[0, 1] > np.corrcoef(lt, far)[0, 1]


def test_m4_regime_steps_present():
    cfg = ModelConfig("M4")
    paths = generate_dataset(cfg, 2, n_subjects=2000)
    lead = GRID.steps_for(cfg.lead_time)
    l = np.stack([p.l_minus for p in paths])
    a = np.stack([p.a for p in paths])
    lag, now = l[:, : GRID.n_steps - lead], l[:, lead : GRID.n_steps]
    an = a[:, lead : GRID.n_steps]
    in_regime = ((lag > 101) & (now > 101) & (an == 1)) | ((lag < 99) & (now < 99) & (an == 0))
    assert in_regime.mean() > 0
    # inside the regimes flips happen at rate 2.8 per unit time
    flips = (a[:, lead + 1 :] != an)[in_regime]
    assert flips.mean() / GRID.step == pytest.approx(2.8, rel=0.15)


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig("M5")
    with pytest.raises(ParameterError):
        ModelConfig("M1", n_subjects=0)
    with pytest.raises(ParameterError):
        ModelConfig("M4", grid=TimeGrid(0.0, 5.0, 0.2))  # lead 0.5 is not a whole number of steps
    with pytest.raises(ParameterError):
        ModelConfig("M4", m4_regime_on="x")
    assert ModelConfig("M2").env is not None
