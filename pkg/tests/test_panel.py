import numpy as np
import pandas as pd
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ctgest.data import diarrhea_synthetic_path
from ctgest.dgp import ContinuousPath, ModelConfig, generate_dataset, integrate_treatment
from ctgest.panel import (
    PanelDataset,
    PanelError,
    PanelSchema,
    discretize,
    panel_from_paths,
    read_panel_csv,
    write_panel_csv,
)
from ctgest.sde_sim import TimeGrid

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def panels(draw):
    n = draw(st.integers(1, 6))
    kp1 = draw(st.integers(2, 5))
    n_l = draw(st.integers(0, 2))
    n_v = draw(st.integers(0, 2))
    a = np.array(draw(st.lists(st.integers(0, 1), min_size=n * kp1, max_size=n * kp1)), dtype=np.int8).reshape(n, kp1)
    frac = np.array(draw(st.lists(st.floats(0, 1), min_size=n * (kp1 - 1), max_size=n * (kp1 - 1)))).reshape(n, kp1 - 1)
    cum = np.zeros((n, kp1))
    cum[:, 1:] = np.cumsum(frac, axis=1)
    y = np.array(draw(st.lists(finite, min_size=n * kp1, max_size=n * kp1))).reshape(n, kp1)
    l = np.array(draw(st.lists(finite, min_size=n * kp1 * n_l, max_size=n * kp1 * n_l))).reshape(n, kp1, n_l)
    v = np.array(draw(st.lists(finite, min_size=n * n_v, max_size=n * n_v))).reshape(n, n_v)
    return PanelDataset(
        ids=np.arange(n) * 7 + 3,
        y=y,
        a=a,
        cum_a=cum,
        l=l,
        v=v,
        l_names=[f"c{j}" for j in range(n_l)],
        v_names=[f"b{j}" for j in range(n_v)],
    )


@given(panel=panels())
@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_csv_round_trip_lossless(panel, tmp_path):
    path = tmp_path / "p.csv"
    write_panel_csv(panel, path)
    back = read_panel_csv(path)
    np.testing.assert_array_equal(back.ids, panel.ids)
    for name in ("y", "a", "cum_a", "l", "v"):
        np.testing.assert_array_equal(getattr(back, name), getattr(panel, name))
    assert back.l_names == panel.l_names and back.v_names == panel.v_names


def test_simulated_round_trip(tmp_path):
    panel = panel_from_paths(generate_dataset(ModelConfig("M4"), 0, n_subjects=5))
    write_panel_csv(panel, tmp_path / "m4.csv")
    back = read_panel_csv(tmp_path / "m4.csv")
    np.testing.assert_array_equal(back.y, panel.y)
    np.testing.assert_array_equal(back.l, panel.l)


def _path(a_times):
    """Subject with treatment switched on at each time in ``a_times`` (toggling)."""
    g = TimeGrid(0.0, 3.0, 0.01)
    a = np.zeros(g.n_points, dtype=np.int8)
    for t in a_times:
        a[g.index(t):] = 1 - a[g.index(t)]
    cum = integrate_treatment(a, g)
    y0 = np.full(g.n_points, 100.0)
    return ContinuousPath(g, y0, y0 + cum, a, cum, np.cumsum(np.r_[0, np.diff(a) != 0]))


def test_left_limit_convention():
    rec = discretize(_path([1.0]), [0, 1, 2, 3])
    # the flip at t=1 shows in A at visit 1 but not in the exposure up to 1
    assert rec["a"].tolist() == [0, 1, 1, 1]
    np.testing.assert_allclose(rec["cum_a"], [0.0, 0.0, 1.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(rec["y"], 100 + rec["cum_a"])


def test_left_limit_switch_off():
    rec = discretize(_path([0.0, 2.0]), [0, 1, 2, 3])
    assert rec["a"].tolist() == [1, 1, 0, 0]
    np.testing.assert_allclose(rec["cum_a"], [0.0, 1.0, 2.0, 2.0], atol=1e-12)


def _write(tmp_path, rows, cols=("id", "visit", "y", "a", "cum_a")):
    p = tmp_path / "bad.csv"
    pd.DataFrame(rows, columns=list(cols)).to_csv(p, index=False)
    return p


def test_missing_visit_names_subject(tmp_path):
    p = _write(tmp_path, [(1, 0, 1.0, 0, 0), (1, 1, 1.0, 0, 0), (2, 0, 1.0, 0, 0)])
    with pytest.raises(PanelError, match="subject 2: missing visit"):
        read_panel_csv(p)


def test_nonbinary_treatment_names_subject(tmp_path):
    p = _write(tmp_path, [(1, 0, 1.0, 0, 0), (1, 1, 1.0, 2, 0)])
    with pytest.raises(PanelError, match="subject 1: treatment at visit 1"):
        read_panel_csv(p)


def test_decreasing_exposure_rejected(tmp_path):
    p = _write(tmp_path, [(5, 0, 1.0, 1, 0), (5, 1, 1.0, 0, 1), (5, 2, 1.0, 0, 0.5)])
    with pytest.raises(PanelError, match="subject 5: cum_a decreasing at visit 2"):
        read_panel_csv(p)


def test_exposure_growth_capped_for_unit_visits(tmp_path):
    p = _write(tmp_path, [(5, 0, 1.0, 1, 0), (5, 1, 1.0, 0, 3)])
    with pytest.raises(PanelError, match="growing by more than"):
        read_panel_csv(p)
    relaxed = PanelSchema(zero_start=False, max_increment=None)
    assert read_panel_csv(p, relaxed).cum_a[0, 1] == 3


def test_missing_column(tmp_path):
    p = _write(tmp_path, [(1, 0, 1.0, 0)], cols=("id", "visit", "y", "a"))
    with pytest.raises(PanelError, match="cum_a"):
        read_panel_csv(p)


def test_duplicate_visit(tmp_path):
    p = _write(tmp_path, [(1, 0, 1.0, 0, 0), (1, 0, 1.0, 0, 0), (1, 1, 1.0, 0, 0)])
    with pytest.raises(PanelError, match="duplicate visit"):
        read_panel_csv(p)


def test_subset_and_concat():
    panel = panel_from_paths(generate_dataset(ModelConfig("M1"), 0, n_subjects=4))
    both = panel.subset([0, 1]).concat(panel.subset([2, 3]))
    np.testing.assert_array_equal(both.y, panel.y)


def test_bundled_panel_reads():
    schema = PanelSchema(zero_start=False, max_increment=None)
    panel = read_panel_csv(diarrhea_synthetic_path(), schema)
    assert panel.n_subjects == 224 and panel.k_max == 2
    assert "muac" in panel.l_names and "age_months" in panel.v_names
