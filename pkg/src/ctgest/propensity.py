"""Propensity designs for the three estimators and the logistic link.

A design is built from a closed vocabulary of terms, evaluated at every
visit k of ``k_range``:

    const     1
    a_lag     A*_{k-1}
    y_lag     Y*_{k-1}
    y_now     Y*_k
    cum_a     cumA*_k
    l_now     L*_k            (whole covariate block)
    l_lag     L*_{k-1}        (whole covariate block)
    v         V               (baseline block)
    y0_next   Y0*_{k+1}(psi) = Y*_{k+1} - psi * cumA*_{k+1}

Only ``y0_next`` depends on psi, and it does so linearly, so a design is
stored as ``x(psi) = x0 + psi * dx``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .panel import PanelDataset

TERMS = ("const", "a_lag", "y_lag", "y_now", "cum_a", "l_now", "l_lag", "v", "y0_next")
KINDS = ("naive", "modified", "controlling_future")
LAG_TERMS = {"a_lag", "y_lag", "l_lag"}

PROB_CLIP = 1e-12


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class PropensitySpec:
    kind: str
    covariate_terms: tuple[str, ...]
    k_range: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "covariate_terms", tuple(self.covariate_terms))
        if self.k_range is not None:
            object.__setattr__(self, "k_range", tuple(int(k) for k in self.k_range))
        if self.kind not in KINDS:
            raise SpecError(f"unknown estimator kind {self.kind!r}")
        unknown = [t for t in self.covariate_terms if t not in TERMS]
        if unknown:
            raise SpecError(f"unknown design terms: {unknown}")
        if len(set(self.covariate_terms)) != len(self.covariate_terms):
            raise SpecError("repeated design term")
        terms = set(self.covariate_terms)
        if self.kind == "controlling_future" and "y0_next" not in terms:
            raise SpecError("controlling_future design must include y0_next")
        if self.kind != "controlling_future" and "y0_next" in terms:
            raise SpecError(f"{self.kind} design cannot include y0_next")
        if self.kind == "naive" and "cum_a" in terms:
            raise SpecError("naive design cannot include cum_a")
        if self.kind == "modified" and "cum_a" not in terms:
            raise SpecError("modified design must include cum_a")

    def default_k_range(self, k_max: int) -> tuple[int, ...]:
        k_min = 1 if LAG_TERMS & set(self.covariate_terms) else 0
        k_top = k_max - 2 if self.kind == "controlling_future" else k_max - 1
        return tuple(range(k_min, k_top + 1))

    def resolved_k_range(self, k_max: int) -> tuple[int, ...]:
        ks = self.k_range if self.k_range is not None else self.default_k_range(k_max)
        return ks


SIMULATION_TERMS = {
    "naive": ("const", "a_lag", "y_lag", "y_now"),
    "modified": ("const", "a_lag", "y_lag", "y_now", "cum_a"),
    "controlling_future": ("const", "a_lag", "y_lag", "y_now", "cum_a", "y0_next"),
}

APPLICATION_TERMS = {
    "naive": ("const", "v", "l_now", "y_now"),
    "modified": ("const", "v", "l_now", "y_now", "cum_a"),
    "controlling_future": ("const", "v", "l_now", "y_now", "cum_a", "y0_next"),
}


def default_spec(kind: str, layout: str = "simulation", has_l: bool = False) -> PropensitySpec:
    """Propensity design used in the simulation study or the three-visit application.

    In the simulation layout, panels carrying a covariate block add its lagged
    and current values after the outcome terms (and before y0_next).
    """
    if layout == "simulation":
        terms = list(SIMULATION_TERMS[kind])
        if has_l:
            at = terms.index("y0_next") if "y0_next" in terms else len(terms)
            terms[at:at] = ["l_lag", "l_now"]
    elif layout == "application":
        terms = list(APPLICATION_TERMS[kind])
    else:
        raise SpecError(f"unknown layout {layout!r}")
    return PropensitySpec(kind, tuple(terms))


def exposure(panel: PanelDataset, kind: str) -> np.ndarray:
    """Exposure subtracted from Y*_m to form the putative untreated outcome.

    Modified and controlling-the-future use the recorded cumA*_m; naive uses
    the per-visit sum of A*_l over l < m (relative to the first visit).
    """
    if kind == "naive":
        out = np.zeros_like(panel.y)
        out[:, 1:] = np.cumsum(panel.a[:, :-1], axis=1)
        return out
    return panel.cum_a


def putative_y0(panel: PanelDataset, kind: str, psi: float) -> np.ndarray:
    return panel.y - psi * exposure(panel, kind)


@dataclass
class DesignRow:
    subject: object
    k: int
    x: np.ndarray
    a: int


@dataclass
class Design:
    """Stacked design, shape (n_subjects, n_visits_used, n_columns)."""

    spec: PropensitySpec
    ks: tuple[int, ...]
    columns: tuple[str, ...]
    x0: np.ndarray
    dx: np.ndarray
    a: np.ndarray
    ids: np.ndarray

    def x(self, psi: float) -> np.ndarray:
        if not self.depends_on_psi:
            return self.x0
        return self.x0 + psi * self.dx

    @property
    def depends_on_psi(self) -> bool:
        return bool(np.any(self.dx))

    def rows(self, psi: float) -> list[DesignRow]:
        x = self.x(psi)
        return [
            DesignRow(self.ids[i], k, x[i, j].copy(), int(self.a[i, j]))
            for i in range(x.shape[0])
            for j, k in enumerate(self.ks)
        ]


def build_design(panel: PanelDataset, spec: PropensitySpec, psi: float = 0.0) -> Design:
    """Design rows for every subject and every visit in the spec's k range.

    ``psi`` is only used through ``Design.rows``; the returned object holds
    the psi-free part and the psi slope separately.
    """
    kmax = panel.k_max
    ks = spec.resolved_k_range(kmax)
    if not ks:
        raise SpecError(f"no usable visits for {spec.kind} with K={kmax}")
    for k in ks:
        if k < 0 or k > kmax:
            raise SpecError(f"visit {k} outside 0..{kmax}")
        if k == 0 and LAG_TERMS & set(spec.covariate_terms):
            raise SpecError("lagged terms need k >= 1")
        if "y0_next" in spec.covariate_terms and k + 1 > kmax:
            raise SpecError(f"y0_next needs visit {k + 1} <= K={kmax}")
    kidx = np.asarray(ks)
    n = panel.n_subjects
    blocks, slopes, names = [], [], []

    def add(names_, block, slope=None):
        block = np.asarray(block, dtype=float)
        if block.ndim == 2:
            block = block[:, :, None]
        blocks.append(block)
        slopes.append(np.zeros_like(block) if slope is None else slope[:, :, None])
        names.extend(names_)

    for term in spec.covariate_terms:
        if term == "const":
            add([term], np.ones((n, len(ks))))
        elif term == "a_lag":
            add([term], panel.a[:, kidx - 1])
        elif term == "y_lag":
            add([term], panel.y[:, kidx - 1])
        elif term == "y_now":
            add([term], panel.y[:, kidx])
        elif term == "cum_a":
            add([term], panel.cum_a[:, kidx])
        elif term == "l_now":
            add([f"l_now:{s}" for s in panel.l_names], panel.l[:, kidx, :])
        elif term == "l_lag":
            add([f"l_lag:{s}" for s in panel.l_names], panel.l[:, kidx - 1, :])
        elif term == "v":
            add([f"v:{s}" for s in panel.v_names], np.repeat(panel.v[:, None, :], len(ks), axis=1))
        elif term == "y0_next":
            add([term], panel.y[:, kidx + 1], -panel.cum_a[:, kidx + 1])
    x0 = np.concatenate(blocks, axis=2)
    dx = np.concatenate(slopes, axis=2)
    return Design(spec, tuple(ks), tuple(names), x0, dx, panel.a[:, kidx].astype(float), panel.ids)


# --------------------------------------------------------------------------
# logistic link


def logistic(x, beta) -> np.ndarray:
    """expit(x . beta), clipped away from 0 and 1."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[-1]:
        raise ValueError(f"design has {x.shape[-1]} columns, beta has {beta.shape[-1]}")
    return np.clip(expit(x @ beta), PROB_CLIP, 1.0 - PROB_CLIP)


def logistic_grad_beta(x, beta) -> np.ndarray:
    """d p / d beta = p (1 - p) x (unclipped derivative)."""
    x = np.asarray(x, dtype=float)
    p = expit(x @ np.asarray(beta, dtype=float))
    return (p * (1 - p))[..., None] * x


def logistic_grad_psi(x0, dx, beta, psi) -> np.ndarray:
    """d p / d psi through the psi-dependent design entries."""
    x = np.asarray(x0) + psi * np.asarray(dx)
    beta = np.asarray(beta, dtype=float)
    p = expit(x @ beta)
    return p * (1 - p) * (np.asarray(dx) @ beta)


def _loglik(x, a, w, beta):
    eta = x @ beta
    # log(1 + e^eta) computed stably
    return float(np.sum(w * (a * eta - np.logaddexp(0.0, eta))))


def fit_logistic(x, a, weights=None, max_iter: int = 100, tol: float = 1e-10, beta0=None):
    """Weighted logistic MLE by iteratively reweighted least squares.

    Newton steps are halved while they lower the log-likelihood. Returns
    (beta, converged, information matrix); ``x`` is (rows, p). A fit that
    drives fitted probabilities to 0 or 1 (separation) is not converged.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    w0 = np.ones(len(a)) if weights is None else np.asarray(weights, dtype=float)
    beta = np.zeros(x.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    ll = _loglik(x, a, w0, beta)
    converged = False
    for _ in range(max_iter):
        p = expit(x @ beta)
        w = w0 * p * (1 - p)
        info = (x * w[:, None]).T @ x
        score = x.T @ (w0 * (a - p))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        lam = 1.0
        for _ in range(30):
            cand = beta + lam * step
            ll_c = _loglik(x, a, w0, cand)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            lam /= 2
        beta, ll = cand, ll_c
        if np.max(np.abs(lam * step)) < tol * (1 + np.max(np.abs(beta))):
            converged = True
            break
    p = expit(x @ beta)
    if np.min(p) < 1e-8 or np.max(p) > 1 - 1e-8:
        converged = False
    w = w0 * p * (1 - p)
    info = (x * w[:, None]).T @ x
    return beta, converged, info
