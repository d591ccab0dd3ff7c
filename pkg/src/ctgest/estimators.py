"""Stacked estimating equations for naive, modified and controlling-the-future
g-estimation, with a damped Newton solver and sandwich covariance.

For a spec with design x_k(psi) and instrument pairs (k, m), subject i
contributes

    U_i(psi, beta) = sum_{(k, m)} (A*_{ik} - p_ik) [Y0*_{im}(psi), x_ik(psi)]

with p_ik = expit(x_ik(psi) . beta). Summing over m first, each visit k
enters as (A - p) [S_ik(psi), n_k x_ik(psi)] where S_ik is the sum of the
putative untreated outcomes over the m paired with k and n_k is the number
of such m. The system is square: dim U = 1 + dim beta.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .panel import PanelDataset
from .propensity import (
    PROB_CLIP,
    Design,
    PropensitySpec,
    build_design,
    exposure,
    fit_logistic,
)

log = logging.getLogger(__name__)


class StructureError(ValueError):
    pass


class IdentificationError(np.linalg.LinAlgError):
    def __init__(self, msg, cond):
        super().__init__(msg)
        self.cond = cond


@dataclass(frozen=True)
class EstimatorSpec:
    propensity: PropensitySpec
    pairs: Optional[tuple[tuple[int, int], ...]] = None

    @property
    def kind(self) -> str:
        return self.propensity.kind

    def resolved_pairs(self, k_max: int) -> tuple[tuple[int, int], ...]:
        gap = 2 if self.kind == "controlling_future" else 1
        if self.pairs is not None:
            for k, m in self.pairs:
                if not (k + gap <= m <= k_max):
                    raise StructureError(f"pair ({k}, {m}) violates k + {gap} <= m <= K={k_max}")
            return tuple(self.pairs)
        ks = self.propensity.resolved_k_range(k_max)
        return tuple((k, m) for k in ks for m in range(k + gap, k_max + 1))


@dataclass
class Theta:
    psi: float
    beta: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.psi], np.asarray(self.beta, dtype=float)])

    @classmethod
    def from_vector(cls, v) -> "Theta":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), v[1:].copy())


@dataclass
class Identification:
    rank_ok: bool
    cond_B: float
    cond_covU: float


@dataclass
class EstimateResult:
    kind: str
    theta_hat: Theta
    covariance: Optional[np.ndarray]
    std_errors: Optional[np.ndarray]
    converged: bool
    iterations: int
    final_residual_norm: float
    identification: Identification
    columns: tuple[str, ...] = ()
    n_subjects: int = 0
    message: str = ""

    @property
    def psi(self) -> float:
        return self.theta_hat.psi

    @property
    def psi_se(self) -> float:
        if self.std_errors is None:
            return float("nan")
        return float(self.std_errors[0])

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.psi - z * self.psi_se, self.psi + z * self.psi_se

    def report(self) -> dict:
        # ':' would read back as a key/value delimiter in INI reports
        names = ("psi",) + tuple(f"beta[{c.replace(':', '.')}]" for c in self.columns)
        out = {
            "estimator": self.kind,
            "n_subjects": self.n_subjects,
            "psi_hat": self.psi,
            "psi_se": self.psi_se,
            "converged": self.converged,
            "iterations": self.iterations,
            "final_residual_norm": self.final_residual_norm,
            "rank_ok": self.identification.rank_ok,
            "cond_B": self.identification.cond_B,
            "cond_covU": self.identification.cond_covU,
        }
        for j, name in enumerate(names):
            out[f"estimate.{name}"] = float(self.theta_hat.vector()[j])
            if self.std_errors is not None:
                out[f"se.{name}"] = float(self.std_errors[j])
        if self.message:
            out["message"] = self.message
        return out


# --------------------------------------------------------------------------
# the system


class EstimatingSystem:
    """Precomputed pieces of U(theta) for one panel and spec."""

    def __init__(self, panel: PanelDataset, spec: EstimatorSpec):
        self.panel = panel
        self.spec = spec
        self.design: Design = build_design(panel, spec.propensity)
        pairs = spec.resolved_pairs(panel.k_max)
        if not pairs:
            raise StructureError("empty set of (k, m) pairs")
        ks = self.design.ks
        if any(k not in ks for k, _ in pairs):
            raise StructureError("pair uses a visit outside the propensity k range")
        expo = exposure(panel, spec.kind)
        n = panel.n_subjects
        # per visit k: number of paired m, sum of Y*_m and of the exposure
        self.n_k = np.zeros(len(ks))
        self.y_sum = np.zeros((n, len(ks)))
        self.c_sum = np.zeros((n, len(ks)))
        for k, m in pairs:
            j = ks.index(k)
            self.n_k[j] += 1
            self.y_sum[:, j] += panel.y[:, m]
            self.c_sum[:, j] += expo[:, m]
        self.pairs = pairs
        self.dim = 1 + self.design.x0.shape[2]

    @property
    def n(self) -> int:
        return self.panel.n_subjects

    def _parts(self, theta_vec):
        psi, beta = theta_vec[0], theta_vec[1:]
        d = self.design
        x = d.x(psi)
        p = np.clip(expit(x @ beta), PROB_CLIP, 1 - PROB_CLIP)
        r = d.a - p
        s = self.y_sum - psi * self.c_sum
        return psi, beta, x, p, r, s

    def contributions(self, theta_vec) -> np.ndarray:
        """Per-subject U_i, shape (n, dim)."""
        _, _, x, _, r, s = self._parts(np.asarray(theta_vec, dtype=float))
        u_psi = np.sum(r * s, axis=1)
        u_beta = np.einsum("ij,ijc->ic", r * self.n_k, x)
        return np.column_stack([u_psi, u_beta])

    def U(self, theta_vec) -> np.ndarray:
        return self.contributions(theta_vec).sum(axis=0)

    def jacobian(self, theta_vec) -> np.ndarray:
        """Analytic dU/dtheta (plain Jacobian, no sign flip)."""
        psi, beta, x, p, r, s = self._parts(np.asarray(theta_vec, dtype=float))
        d = self.design
        w = p * (1 - p)
        # G_k = [S_k, n_k x_k]; dU/dbeta = -sum w G x^T
        wn = w * self.n_k
        j_psi_beta = -np.einsum("ij,ij,ijc->c", w, s, x)
        j_beta_beta = -np.einsum("ij,ijc,ijd->cd", wn, x, x)
        # dU/dpsi = sum[-w (beta . dx) G + r dG], dG = [-C_k, n_k dx]
        jac = np.zeros((self.dim, self.dim))
        jac[0, 1:] = j_psi_beta
        jac[1:, 1:] = j_beta_beta
        jac[0, 0] = -np.sum(r * self.c_sum)
        if d.depends_on_psi:
            eta = d.dx @ beta
            jac[0, 0] += -np.sum(w * eta * s)
            jac[1:, 0] = -np.einsum("ij,ijc->c", wn * eta, x) + np.einsum("ij,ijc->c", r * self.n_k, d.dx)
        else:
            jac[1:, 0] = 0.0
        return jac

    def initial_theta(self, psi0: float = 0.0) -> np.ndarray:
        """psi0 with beta from a logistic fit of A on the design at psi0."""
        d = self.design
        x = d.x(psi0).reshape(-1, d.x0.shape[2])
        wts = np.broadcast_to(self.n_k, d.a.shape).ravel()
        keep = wts > 0
        beta, _, _ = fit_logistic(x[keep], d.a.ravel()[keep], wts[keep])
        if not np.all(np.isfinite(beta)):
            beta = np.zeros(x.shape[1])
        return np.concatenate([[psi0], beta])


# --------------------------------------------------------------------------
# public operations


def estimating_function(panel: PanelDataset, spec: EstimatorSpec, theta: Theta) -> np.ndarray:
    return EstimatingSystem(panel, spec).U(theta.vector())


def identification_check(B, covU, tol: float = 1e-10) -> Identification:
    B = np.asarray(B, dtype=float)
    covU = np.asarray(covU, dtype=float)
    if B.shape != covU.shape or B.shape[0] != B.shape[1]:
        raise ValueError("B and covU must be square and of equal size")

    def cond(m):
        if not np.all(np.isfinite(m)):
            return float("inf")
        with np.errstate(divide="ignore"):
            c = np.linalg.cond(m)
        return float(c) if np.isfinite(c) else float("inf")

    cb, cu = cond(B), cond(covU)
    return Identification(bool(cb < 1 / tol and cu < 1 / tol), cb, cu)


def _sandwich(system: EstimatingSystem, theta_vec):
    B = system.jacobian(theta_vec)
    ui = system.contributions(theta_vec)
    meat = ui.T @ ui
    return B, meat


def sandwich_cov(panel: PanelDataset, spec: EstimatorSpec, theta_hat: Theta) -> np.ndarray:
    """B^-1 (sum_i U_i U_i') B^-T with subjects as clusters."""
    system = EstimatingSystem(panel, spec)
    B, meat = _sandwich(system, theta_hat.vector())
    ident = identification_check(B, np.eye(len(B)))
    if not ident.rank_ok:
        raise IdentificationError(f"Jacobian is singular (cond {ident.cond_B:.3g})", ident.cond_B)
    binv = np.linalg.inv(B)
    cov = binv @ meat @ binv.T
    return (cov + cov.T) / 2


def solve(
    panel: PanelDataset,
    spec: EstimatorSpec,
    init: Optional[Theta] = None,
    tol: float = 1e-8,
    step_tol: float = 1e-10,
    max_iter: int = 100,
    max_halvings: int = 30,
    max_step: float = 1.0,
) -> EstimateResult:
    """Newton-Raphson on U(theta) = 0 with the propensity block profiled out.

    For fixed psi the beta equations are the score of a weighted logistic
    likelihood, so beta(psi) is refitted at every iterate (warm-started
    IRLS) and the problem reduces to the scalar root f(psi) = U_psi(psi,
    beta(psi)). Its derivative is the Schur complement of the analytic
    Jacobian.

    The psi step is safeguarded: it is capped at ``max_step * (1 + |psi|)``;
    until a sign change of f has been seen it is halved (at most
    ``max_halvings`` times) until |f| decreases; afterwards the iterate stays
    inside the bracket and falls back to bisection when Newton leaves it.
    If that fails, f is scanned outward from the start for the nearest sign
    change and the bracketed iteration restarts there. Only the
    controlling-the-future profile is nonlinear in psi; for the other
    estimators the first Newton step is exact.

    Converges when max|U|/n < ``tol`` (or the bracket / step shrinks below
    ``step_tol``). Failures come back as ``converged=False``.
    """
    system = EstimatingSystem(panel, spec)
    n = system.n
    d = system.design
    wts = np.broadcast_to(system.n_k, d.a.shape).ravel()
    a_flat = d.a.ravel()
    p_cols = d.x0.shape[2]

    if init is None:
        psi0, beta0 = 0.0, None
    else:
        psi0 = float(init.psi)
        beta0 = np.asarray(init.beta, dtype=float)
        if not (np.isfinite(psi0) and np.all(np.isfinite(beta0))):
            raise ValueError("initial theta must be finite")

    def profile(psi, beta_start):
        beta, ok, _ = fit_logistic(d.x(psi).reshape(-1, p_cols), a_flat, wts, beta0=beta_start)
        theta = np.concatenate([[psi], beta])
        u = system.U(theta)
        return theta, u, bool(ok and np.all(np.isfinite(u)))

    def slope_at(theta):
        jac = system.jacobian(theta)
        if not np.all(np.isfinite(jac)):
            return None
        try:
            sl = jac[0, 0] - jac[0, 1:] @ np.linalg.solve(jac[1:, 1:], jac[1:, 0])
        except np.linalg.LinAlgError:
            return None
        scale = np.max(np.abs(jac[0])) or 1.0
        if not np.isfinite(sl) or abs(sl) < 1e-14 * scale:
            return None
        return sl

    def iterate(theta, u, bracket, budget):
        """Returns (theta, u, converged, iterations, message)."""
        it = 0
        while it < budget:
            if np.max(np.abs(u)) / n < tol:
                return theta, u, True, it, ""
            it += 1
            psi = theta[0]
            sl = slope_at(theta)
            if sl is None:
                if bracket is None:
                    return theta, u, False, it, "singular Jacobian"
                step = 0.5 * (bracket[0][0] + bracket[1][0]) - psi
            else:
                step = -u[0] / sl
            cap = max_step * (1.0 + abs(psi))
            step = float(np.clip(step, -cap, cap))
            if bracket is not None:
                lo, hi = sorted(x for x, _ in bracket)
                if not (lo < psi + step < hi):
                    step = 0.5 * (lo + hi) - psi
                cand, u_c, ok = profile(psi + step, theta[1:])
                if not ok:
                    return theta, u, False, it, "propensity fit failed (separation?)"
                bracket = _update_bracket(bracket, cand[0], u_c[0])
                theta, u = cand, u_c
                if abs(bracket[0][0] - bracket[1][0]) < step_tol:
                    conv = np.max(np.abs(u)) / n < np.sqrt(tol)
                    return theta, u, conv, it, "converged on bracket width" if conv else "stalled"
                continue
            lam = 1.0
            for _ in range(max_halvings + 1):
                cand, u_c, ok = profile(psi + lam * step, theta[1:])
                if ok and (np.sign(u_c[0]) != np.sign(u[0]) or abs(u_c[0]) < abs(u[0])):
                    break
                lam /= 2
            else:
                return theta, u, False, it, "line search failed"
            if np.sign(u_c[0]) != np.sign(u[0]):
                bracket = ((psi, u[0]), (cand[0], u_c[0]))
            theta, u = cand, u_c
            if abs(lam * step) < step_tol:
                conv = np.max(np.abs(u)) / n < np.sqrt(tol)
                return theta, u, conv, it, "converged on step size" if conv else "stalled"
        return theta, u, False, it, "iteration limit"

    theta, u, ok = profile(psi0, beta0)
    if not ok:
        theta, u, converged, it, message = theta, u, False, 0, "propensity fit failed (separation?)"
    else:
        start = (theta, u)
        theta, u, converged, it, message = iterate(theta, u, None, max_iter)
        if not converged:
            found = _scan_for_sign_change(profile, *start, max_step)
            if found is not None:
                (t_near, u_near), (t_far, u_far) = found
                log.debug("%s: restarting from bracket [%g, %g]", spec.kind, t_near[0], t_far[0])
                bracket = ((t_near[0], u_near[0]), (t_far[0], u_far[0]))
                theta, u, converged, it2, message = iterate(t_near, u_near, bracket, max_iter)
                it += it2

    B, meat = _sandwich(system, theta)
    ident = identification_check(B, meat)
    cov = se = None
    if converged and ident.rank_ok:
        binv = np.linalg.inv(B)
        cov = binv @ meat @ binv.T
        cov = (cov + cov.T) / 2
        se = np.sqrt(np.clip(np.diag(cov), 0, None))
    elif converged:
        message = "identification check failed"
    if not converged:
        log.debug("%s solve did not converge: %s", spec.kind, message)
    return EstimateResult(
        kind=spec.kind,
        theta_hat=Theta.from_vector(theta),
        covariance=cov,
        std_errors=se,
        converged=bool(converged and ident.rank_ok),
        iterations=it,
        final_residual_norm=float(np.max(np.abs(u)) / n),
        identification=ident,
        columns=system.design.columns,
        n_subjects=n,
        message=message,
    )


def _update_bracket(bracket, x, fx):
    """Replace the bracket end whose f has the sign of ``fx``."""
    (xa, fa), (xb, fb) = bracket
    if fx == 0:
        return ((x, fx), (x, fx))
    if np.sign(fx) == np.sign(fa):
        return ((x, fx), (xb, fb))
    return ((xa, fa), (x, fx))


def _scan_for_sign_change(profile, theta0, u0, step0, n_doublings: int = 12):
    """Nearest sign change of the profile f on a doubling grid around psi0.

    Offsets step0 * 2^j (j = -3 .. n_doublings) are visited in increasing
    order, alternately to the right and the left. Returns the two bracketing
    evaluations (nearer end first) or None.
    """
    psi0 = theta0[0]
    scale = step0 * (1.0 + abs(psi0))
    prev = {1: (theta0, u0), -1: (theta0, u0)}
    for j in range(-3, n_doublings + 1):
        for side in (1, -1):
            last_theta, last_u = prev[side]
            cand, u_c, ok = profile(psi0 + side * scale * 2.0 ** j, last_theta[1:])
            if not ok:
                continue
            if np.sign(u_c[0]) != np.sign(last_u[0]):
                return (last_theta, last_u), (cand, u_c)
            prev[side] = (cand, u_c)
    return None


# --------------------------------------------------------------------------
# ignorability diagnostic


@dataclass
class CoefficientRow:
    name: str
    estimate: float
    se: float
    z: float
    p_value: float


@dataclass
class DiagnosticTable:
    k: int
    m: int
    with_future_control: bool
    rows: list[CoefficientRow]
    converged: bool
    separation: bool = False

    def row(self, name: str) -> CoefficientRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


DIAGNOSTIC_HISTORY = ("cum_a", "l_lag", "l_now", "a_lag", "y_now", "y_lag")


def ignorability_diagnostic(
    panel: PanelDataset,
    y0_star,
    k: int,
    m: int,
    with_future_control: bool,
    history: Sequence[str] = DIAGNOSTIC_HISTORY,
) -> DiagnosticTable:
    """Logistic regression of A*_k on history plus untreated outcomes.

    Regresses on an intercept, the ``history`` terms, Y0*_{k+1} when
    ``with_future_control`` and finally Y0*_m. ``y0_star`` is an (n, K+1)
    array of true or putative untreated outcomes. Wald tests use the
    inverse observed information.
    """
    y0_star = np.asarray(y0_star, dtype=float)
    if y0_star.shape != panel.y.shape:
        raise ValueError("y0_star must match the panel outcome shape")
    if not 0 <= k < m <= panel.k_max:
        raise ValueError(f"need 0 <= k < m <= K, got k={k}, m={m}")
    if with_future_control and m <= k + 1:
        raise ValueError("future control needs m > k + 1")
    cols, names = [np.ones(panel.n_subjects)], ["const"]
    for term in history:
        if term in ("a_lag", "y_lag", "l_lag") and k == 0:
            continue
        if term == "cum_a":
            cols.append(panel.cum_a[:, k]); names.append("cum_a")
        elif term == "a_lag":
            cols.append(panel.a[:, k - 1].astype(float)); names.append("a_lag")
        elif term == "y_now":
            cols.append(panel.y[:, k]); names.append("y_now")
        elif term == "y_lag":
            cols.append(panel.y[:, k - 1]); names.append("y_lag")
        elif term in ("l_now", "l_lag"):
            kk = k if term == "l_now" else k - 1
            for j, s in enumerate(panel.l_names):
                cols.append(panel.l[:, kk, j]); names.append(f"{term}:{s}")
        elif term == "v":
            for j, s in enumerate(panel.v_names):
                cols.append(panel.v[:, j]); names.append(f"v:{s}")
        else:
            raise ValueError(f"unknown history term {term!r}")
    if with_future_control:
        cols.append(y0_star[:, k + 1]); names.append("y0_next")
    cols.append(y0_star[:, m]); names.append("y0_m")
    x = np.column_stack(cols)
    a = panel.a[:, k].astype(float)
    beta, converged, info = fit_logistic(x, a)
    rows = []
    separation = not converged
    cov = None
    if converged:
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            separation = True
    for j, name in enumerate(names):
        if cov is None or cov[j, j] <= 0:
            rows.append(CoefficientRow(name, float(beta[j]), float("inf"), 0.0, float("nan")))
            continue
        se = float(np.sqrt(cov[j, j]))
        z = float(beta[j] / se)
        rows.append(CoefficientRow(name, float(beta[j]), se, z, float(2 * stats.norm.sf(abs(z)))))
    return DiagnosticTable(k, m, with_future_control, rows, bool(converged and not separation), separation)
