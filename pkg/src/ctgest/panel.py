"""Discrete-visit panels: discretisation of continuous paths and CSV I/O.

Conventions at visit k (integer time):

* outcome and covariates are left limits, Y*_k = Y_{k-};
* treatment is the right-continuous value A_k;
* cumulative treatment is int_0^{k-} A_s ds, excluding any flip at k.

The CSV layout is long format, one row per (subject, visit)::

    id,visit,y,a,cum_a[,l_<name>...][,v_<name>...]
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .dgp import ContinuousPath


class PanelError(ValueError):
    """Malformed panel data or schema."""


@dataclass
class PanelDataset:
    """Balanced panel over visits 0..K.

    Arrays are subject-major: ``y``, ``a`` and ``cum_a`` have shape (n, K+1),
    ``l`` has shape (n, K+1, n_l) and ``v`` has shape (n, n_v).
    """

    ids: np.ndarray
    y: np.ndarray
    a: np.ndarray
    cum_a: np.ndarray
    l: np.ndarray = None
    v: np.ndarray = None
    l_names: tuple[str, ...] = ()
    v_names: tuple[str, ...] = ()
    # exposure bookkeeping: simulated panels start at 0 and add at most one
    # time unit per visit; real data may count e.g. days since a pre-study date
    zero_start: bool = True
    max_increment: Optional[float] = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.cum_a = np.asarray(self.cum_a, dtype=float)
        self.a = np.asarray(self.a)
        n, kp1 = self.y.shape if self.y.ndim == 2 else (0, 0)
        self.ids = np.asarray(self.ids)
        if self.l is None:
            self.l = np.zeros((n, kp1, 0))
        if self.v is None:
            self.v = np.zeros((n, 0))
        self.l = np.asarray(self.l, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.l_names = tuple(self.l_names)
        self.v_names = tuple(self.v_names)
        self.validate()

    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]

    @property
    def k_max(self) -> int:
        return self.y.shape[1] - 1

    def validate(self) -> None:
        n, kp1 = self.y.shape
        for name in ("a", "cum_a"):
            if getattr(self, name).shape != (n, kp1):
                raise PanelError(f"{name} has shape {getattr(self, name).shape}, expected {(n, kp1)}")
        if self.l.shape[:2] != (n, kp1) or self.l.shape[2] != len(self.l_names):
            raise PanelError("covariate block l does not match panel shape / names")
        if self.v.shape != (n, len(self.v_names)):
            raise PanelError("baseline block v does not match panel shape / names")
        if len(self.ids) != n:
            raise PanelError("one id per subject required")
        if n == 0:
            return
        bad = ~np.isin(self.a, (0, 1))
        if bad.any():
            i, k = np.argwhere(bad)[0]
            raise PanelError(f"subject {self.ids[i]}: treatment at visit {k} is not binary ({self.a[i, k]})")
        self.a = self.a.astype(np.int8)
        if self.zero_start and np.any(self.cum_a[:, 0] != 0):
            i = int(np.flatnonzero(self.cum_a[:, 0] != 0)[0])
            raise PanelError(f"subject {self.ids[i]}: cum_a at visit 0 must be 0")
        inc = np.diff(self.cum_a, axis=1)
        bad = inc < 0
        if self.max_increment is not None:
            bad |= inc > self.max_increment * (1 + 1e-9)
        if bad.any():
            i, k = np.argwhere(bad)[0]
            kind = "decreasing" if inc[i, k] < 0 else f"growing by more than {self.max_increment}"
            raise PanelError(f"subject {self.ids[i]}: cum_a {kind} at visit {k + 1}")
        for name in ("y", "cum_a", "l", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise PanelError(f"non-finite values in {name}")

    def subset(self, idx) -> "PanelDataset":
        idx = np.asarray(idx)
        return PanelDataset(
            self.ids[idx], self.y[idx], self.a[idx], self.cum_a[idx],
            self.l[idx], self.v[idx], self.l_names, self.v_names,
            self.zero_start, self.max_increment,
        )

    def concat(self, other: "PanelDataset") -> "PanelDataset":
        return PanelDataset(
            np.concatenate([self.ids, other.ids]),
            np.vstack([self.y, other.y]),
            np.vstack([self.a, other.a]),
            np.vstack([self.cum_a, other.cum_a]),
            np.concatenate([self.l, other.l]),
            np.concatenate([self.v, other.v]),
            self.l_names,
            self.v_names,
            self.zero_start,
            self.max_increment,
        )


def discretize(path: ContinuousPath, visit_times: Sequence[int]) -> dict:
    """Observed record of one subject at the given visit times.

    The outcome and covariate processes are continuous in time, so the grid
    value at k is their left limit; the treatment value at k already includes
    a flip occurring at k; cum_a at k excludes it.
    """
    idx = [path.grid.index(t) for t in visit_times]
    rec = {
        "y": path.y[idx].copy(),
        "a": path.a[idx].astype(np.int8),
        "cum_a": path.cum_a[idx].copy(),
    }
    if path.l_minus is not None:
        rec["l"] = path.l_minus[idx][:, None].copy()
    return rec


def panel_from_paths(paths: Sequence[ContinuousPath], visit_times: Optional[Sequence[int]] = None) -> PanelDataset:
    """Discretise simulated subjects into a panel (visits default to 0..K)."""
    if visit_times is None:
        g = paths[0].grid
        visit_times = list(range(int(round(g.t_start)), int(round(g.t_end)) + 1))
    recs = [discretize(p, visit_times) for p in paths]
    has_l = "l" in recs[0]
    return PanelDataset(
        ids=np.arange(len(recs)),
        y=np.stack([r["y"] for r in recs]),
        a=np.stack([r["a"] for r in recs]),
        cum_a=np.stack([r["cum_a"] for r in recs]),
        l=np.stack([r["l"] for r in recs]) if has_l else None,
        l_names=("lead",) if has_l else (),
    )


# --------------------------------------------------------------------------
# CSV


@dataclass
class PanelSchema:
    """Maps file columns onto panel roles.

    Covariate and baseline blocks are picked either by explicit column lists
    or by prefix (``l_`` / ``v_`` by default); block names drop the prefix.
    """

    id: str = "id"
    visit: str = "visit"
    y: str = "y"
    a: str = "a"
    cum_a: str = "cum_a"
    l_columns: Optional[list[str]] = None
    v_columns: Optional[list[str]] = None
    l_prefix: str = "l_"
    v_prefix: str = "v_"
    zero_start: bool = True
    max_increment: Optional[float] = 1.0

    def resolve(self, columns: Iterable[str]) -> tuple[list[str], list[str]]:
        cols = list(columns)
        missing = [c for c in (self.id, self.visit, self.y, self.a, self.cum_a) if c not in cols]
        if missing:
            raise PanelError(f"missing required columns: {', '.join(missing)}")
        l_cols = self.l_columns if self.l_columns is not None else [c for c in cols if c.startswith(self.l_prefix)]
        v_cols = self.v_columns if self.v_columns is not None else [c for c in cols if c.startswith(self.v_prefix)]
        absent = [c for c in l_cols + v_cols if c not in cols]
        if absent:
            raise PanelError(f"schema names columns not in file: {', '.join(absent)}")
        return l_cols, v_cols


def _strip(name: str, prefix: str) -> str:
    return name[len(prefix):] if name.startswith(prefix) else name


def read_panel_csv(path, schema: Optional[PanelSchema] = None) -> PanelDataset:
    schema = schema or PanelSchema()
    df = pd.read_csv(path, float_precision="round_trip")
    l_cols, v_cols = schema.resolve(df.columns)
    if df.empty:
        return PanelDataset(
            ids=np.array([]), y=np.zeros((0, 1)), a=np.zeros((0, 1)), cum_a=np.zeros((0, 1)),
            l=np.zeros((0, 1, len(l_cols))), v=np.zeros((0, len(v_cols))),
            l_names=[_strip(c, schema.l_prefix) for c in l_cols],
            v_names=[_strip(c, schema.v_prefix) for c in v_cols],
            zero_start=schema.zero_start, max_increment=schema.max_increment,
        )
    visits = df[schema.visit]
    if not np.all(np.isclose(visits, np.round(visits))):
        raise PanelError("visit column must hold integers")
    df = df.assign(**{schema.visit: np.round(visits).astype(int)})
    all_visits = np.sort(df[schema.visit].unique())
    first = int(all_visits[0])
    expected = np.arange(first, first + len(all_visits))
    if not np.array_equal(all_visits, expected):
        raise PanelError(f"visits must be consecutive integers, found {all_visits.tolist()}")
    n_visits = len(expected)

    ids, ys, as_, cums, ls, vs = [], [], [], [], [], []
    for sid, grp in df.groupby(schema.id, sort=False):
        grp = grp.sort_values(schema.visit)
        got = grp[schema.visit].to_numpy()
        if grp[schema.visit].duplicated().any():
            raise PanelError(f"subject {sid}: duplicate visit {int(got[grp[schema.visit].duplicated()][0])}")
        if not np.array_equal(got, expected):
            lost = sorted(set(expected.tolist()) - set(got.tolist()))
            raise PanelError(f"subject {sid}: missing visit(s) {lost}")
        a = grp[schema.a].to_numpy()
        if not np.all(np.isin(a, (0, 1))):
            k = int(got[~np.isin(a, (0, 1))][0])
            raise PanelError(f"subject {sid}: treatment at visit {k} is not binary")
        cum = grp[schema.cum_a].to_numpy(dtype=float)
        dec = np.flatnonzero(np.diff(cum) < 0)
        if dec.size:
            raise PanelError(f"subject {sid}: cum_a decreasing at visit {int(got[dec[0] + 1])}")
        ids.append(sid)
        ys.append(grp[schema.y].to_numpy(dtype=float))
        as_.append(a.astype(np.int8))
        cums.append(cum)
        ls.append(grp[l_cols].to_numpy(dtype=float))
        if v_cols:
            vv = grp[v_cols].to_numpy(dtype=float)
            if not np.all(vv == vv[0]):
                raise PanelError(f"subject {sid}: baseline covariates vary across visits")
            vs.append(vv[0])
        else:
            vs.append(np.zeros(0))
    return PanelDataset(
        ids=np.asarray(ids),
        y=np.stack(ys),
        a=np.stack(as_),
        cum_a=np.stack(cums),
        l=np.stack(ls).reshape(len(ids), n_visits, len(l_cols)),
        v=np.stack(vs).reshape(len(ids), len(v_cols)),
        l_names=[_strip(c, schema.l_prefix) for c in l_cols],
        v_names=[_strip(c, schema.v_prefix) for c in v_cols],
        zero_start=schema.zero_start,
        max_increment=schema.max_increment,
    )


def panel_columns(panel: PanelDataset) -> list[str]:
    return (
        ["id", "visit", "y", "a", "cum_a"]
        + [f"l_{n}" for n in panel.l_names]
        + [f"v_{n}" for n in panel.v_names]
    )


def write_panel_csv(panel: PanelDataset, path) -> None:
    cols = panel_columns(panel)
    n, kp1 = panel.y.shape
    data = {
        "id": np.repeat(panel.ids, kp1),
        "visit": np.tile(np.arange(kp1), n),
        "y": panel.y.ravel(),
        "a": panel.a.ravel().astype(int),
        "cum_a": panel.cum_a.ravel(),
    }
    for j, name in enumerate(panel.l_names):
        data[f"l_{name}"] = panel.l[:, :, j].ravel()
    for j, name in enumerate(panel.v_names):
        data[f"v_{name}"] = np.repeat(panel.v[:, j], kp1)
    df = pd.DataFrame({c: data[c] for c in cols}, columns=cols)
    parent = os.path.dirname(os.fspath(path))
    if parent and not os.path.isdir(parent):
        raise OSError(f"directory {parent} does not exist")
    # repr-style floats round-trip exactly
    df.to_csv(path, index=False, float_format="%.17g")
