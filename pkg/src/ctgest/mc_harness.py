"""Monte Carlo study driver: configs, replications, summaries and reports.

A study repeats simulate -> discretise -> estimate for R replications.
Replication r draws its dataset from ``derive_seed(master_seed, r)`` and
subject i of that dataset from stream i, so results do not depend on the
order in which replications run or on the number of workers.

Config files are INI (``configparser``) with three sections::

    [model]        model_id, n_subjects, psi, ... (see ``model_to_dict``)
    [estimators]   kinds = naive, modified, controlling_future
    [study]        replications, master_seed, ci_level, workers

Reports use the same format: a ``[study]`` echo, the ``[model]`` section,
one ``[summary.<kind>]`` section per estimator and one
``[replications.<kind>]`` section listing every replication.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .dgp import MODEL_IDS, CausalModel, ModelConfig, generate_dataset
from .estimators import (
    DiagnosticTable,
    EstimatorSpec,
    ignorability_diagnostic,
    solve,
)
from .panel import panel_from_paths
from .propensity import KINDS, default_spec
from .sde_sim import IntensityParams, OuParams, ParameterError, RandomEnvParams, TimeGrid, derive_seed

log = logging.getLogger(__name__)

WORKERS_ENV = "CTGEST_WORKERS"


class ConfigError(ValueError):
    """Invalid or inconsistent study configuration."""


# --------------------------------------------------------------------------
# model <-> flat key/value


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _fmt_list(xs) -> str:
    return ", ".join(_fmt(float(x)) for x in xs)


def model_to_dict(model: ModelConfig) -> dict[str, str]:
    """Flat string mapping of every model parameter (the ``[model]`` section)."""
    g = model.grid
    it = model.intensity
    out = {
        "model_id": model.model_id,
        "n_subjects": _fmt(model.n_subjects),
        "psi": _fmt(model.causal.psi),
        "baseline_constant": _fmt(model.causal.baseline_constant),
        "t_start": _fmt(g.t_start),
        "t_end": _fmt(g.t_end),
        "step": _fmt(g.step),
        "theta": _fmt(model.ou.theta),
        "sigma": _fmt(model.ou.sigma),
        "alpha": _fmt_list([it.alpha0, it.alpha1, it.alpha2, it.alpha3]),
    }
    if model.model_id == "M2":
        out["env_generator"] = "; ".join(_fmt_list(row) for row in model.env.generator)
        out["env_regimes"] = "; ".join(_fmt_list([r.theta, r.sigma]) for r in model.env.regimes)
    if model.model_id == "M3":
        out["m3_weights"] = _fmt_list(model.m3_weights)
        out["m3_lag"] = _fmt(model.m3_lag)
    if model.model_id == "M4":
        out.update(
            m4_high_threshold=_fmt(model.m4_high_threshold),
            m4_low_threshold=_fmt(model.m4_low_threshold),
            m4_regime_rate=_fmt(model.m4_regime_rate),
            m4_regime_on=model.m4_regime_on,
            m4_regime_state=model.m4_regime_state,
            m4_mix=_fmt_list(model.m4_mix),
            m4_noise=_fmt_list([model.m4_noise.theta, model.m4_noise.sigma]),
            lead_time=_fmt(model.lead_time),
        )
    return out


_MODEL_KEYS = {
    "model_id", "n_subjects", "psi", "baseline_constant", "t_start", "t_end", "step",
    "theta", "sigma", "alpha", "env_generator", "env_regimes", "m3_weights", "m3_lag",
    "m4_high_threshold", "m4_low_threshold", "m4_regime_rate", "m4_regime_on",
    "m4_regime_state", "m4_mix", "m4_noise", "lead_time",
}


def model_from_dict(d) -> ModelConfig:
    """Inverse of ``model_to_dict``; missing keys take the model defaults."""
    d = dict(d)
    unknown = sorted(set(d) - _MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown [model] keys: {', '.join(unknown)}")
    mid = d.get("model_id", "M1").strip()
    if mid not in MODEL_IDS:
        raise ConfigError(f"unknown model_id {mid!r}; expected one of {', '.join(MODEL_IDS)}")
    try:
        kw: dict = {"model_id": mid}
        if "n_subjects" in d:
            kw["n_subjects"] = int(d["n_subjects"])
        base = ModelConfig()
        kw["grid"] = TimeGrid(
            float(d.get("t_start", base.grid.t_start)),
            float(d.get("t_end", base.grid.t_end)),
            float(d.get("step", base.grid.step)),
        )
        kw["causal"] = CausalModel(
            float(d.get("psi", base.causal.psi)),
            float(d.get("baseline_constant", base.causal.baseline_constant)),
        )
        kw["ou"] = OuParams(float(d.get("theta", base.ou.theta)), float(d.get("sigma", base.ou.sigma)))
        if "alpha" in d:
            al = _floats(d["alpha"])
            if len(al) != 4:
                raise ConfigError("alpha needs four values")
            kw["intensity"] = IntensityParams(*al)
        if "env_generator" in d or "env_regimes" in d:
            if not ("env_generator" in d and "env_regimes" in d):
                raise ConfigError("env_generator and env_regimes must be given together")
            gen = np.array([_floats(row) for row in d["env_generator"].split(";")])
            regimes = []
            for row in d["env_regimes"].split(";"):
                th, sg = _floats(row)
                regimes.append(OuParams(th, sg))
            kw["env"] = RandomEnvParams(gen, tuple(regimes))
        if "m3_weights" in d:
            kw["m3_weights"] = tuple(_floats(d["m3_weights"]))
        if "m3_lag" in d:
            kw["m3_lag"] = float(d["m3_lag"])
        for key in ("m4_high_threshold", "m4_low_threshold", "m4_regime_rate", "lead_time"):
            if key in d:
                kw[key] = float(d[key])
        for key in ("m4_regime_on", "m4_regime_state"):
            if key in d:
                kw[key] = d[key].strip()
        if "m4_mix" in d:
            kw["m4_mix"] = tuple(_floats(d["m4_mix"]))
        if "m4_noise" in d:
            kw["m4_noise"] = OuParams(*_floats(d["m4_noise"]))
        return ModelConfig(**kw)
    except (ParameterError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad [model] section: {exc}") from exc


# --------------------------------------------------------------------------
# study config


@dataclass
class StudyConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(n_subjects=1000))
    estimators: list = field(default_factory=lambda: [EstimatorSpec(default_spec(k)) for k in KINDS])
    replications: int = 200
    master_seed: int = 0
    ci_level: float = 0.95
    output: Optional[str] = None
    workers: Optional[int] = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0 < self.ci_level < 1:
            raise ConfigError("ci_level must lie in (0, 1)")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ConfigError("master_seed must be a non-negative 64-bit integer")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        kinds = [e.kind for e in self.estimators]
        if len(set(kinds)) != len(kinds):
            raise ConfigError("each estimator kind may appear once")

    @property
    def psi_true(self) -> float:
        return self.model.causal.psi

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        env = os.environ.get(WORKERS_ENV, "").strip()
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
        return 1


def estimators_for(kinds: Sequence[str], model: ModelConfig) -> list[EstimatorSpec]:
    """Simulation-layout specs; M4 panels add their covariate block."""
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"unknown estimator(s): {', '.join(bad)}")
    return [EstimatorSpec(default_spec(k, has_l=model.model_id == "M4")) for k in kinds]


def load_config(path, overrides: Optional[dict] = None) -> StudyConfig:
    """Read an INI study config. ``overrides`` maps "section.key" to a value."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_parser(cp, overrides)


def config_from_parser(cp: configparser.ConfigParser, overrides: Optional[dict] = None) -> StudyConfig:
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, name, str(value))
    extra = sorted(set(cp.sections()) - {"model", "estimators", "study"})
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(extra)}")
    model = model_from_dict(cp["model"] if cp.has_section("model") else {})
    est = cp["estimators"] if cp.has_section("estimators") else {}
    kinds = [k.strip() for k in est.get("kinds", ", ".join(KINDS)).split(",") if k.strip()]
    st = cp["study"] if cp.has_section("study") else {}
    unknown = sorted(set(st) - {"replications", "master_seed", "ci_level", "workers", "output"})
    if unknown:
        raise ConfigError(f"unknown [study] keys: {', '.join(unknown)}")
    try:
        return StudyConfig(
            model=model,
            estimators=estimators_for(kinds, model),
            replications=int(st.get("replications", 200)),
            master_seed=int(st.get("master_seed", 0)),
            ci_level=float(st.get("ci_level", 0.95)),
            output=st.get("output") or None,
            workers=int(st["workers"]) if st.get("workers") else None,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad [study] section: {exc}") from exc


def config_to_parser(config: StudyConfig) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp["model"] = model_to_dict(config.model)
    cp["estimators"] = {"kinds": ", ".join(e.kind for e in config.estimators)}
    cp["study"] = {
        "replications": str(config.replications),
        "master_seed": str(config.master_seed),
        "ci_level": _fmt(config.ci_level),
    }
    return cp


def save_config(config: StudyConfig, path) -> None:
    with open(path, "w") as fh:
        config_to_parser(config).write(fh)


# --------------------------------------------------------------------------
# replications


@dataclass
class EstimateRecord:
    psi: float
    se: float
    covered: Optional[bool]
    converged: bool
    message: str = ""


@dataclass
class ReplicationResult:
    rep_index: int
    estimates: dict  # kind -> EstimateRecord


def replication_seed(master_seed: int, rep_index: int) -> int:
    return derive_seed(master_seed, rep_index)


def run_replication(config: StudyConfig, rep_index: int) -> ReplicationResult:
    """One simulated dataset, every estimator fitted; failures are recorded, not raised."""
    paths = generate_dataset(config.model, replication_seed(config.master_seed, rep_index))
    panel = panel_from_paths(paths)
    z = stats.norm.ppf(0.5 + config.ci_level / 2)
    out = {}
    for spec in config.estimators:
        try:
            res = solve(panel, spec)
        except (ValueError, np.linalg.LinAlgError) as exc:
            out[spec.kind] = EstimateRecord(float("nan"), float("nan"), None, False, str(exc))
            continue
        if res.converged and np.isfinite(res.psi_se):
            covered = bool(abs(res.psi - config.psi_true) <= z * res.psi_se)
            out[spec.kind] = EstimateRecord(res.psi, res.psi_se, covered, True)
        else:
            out[spec.kind] = EstimateRecord(res.psi, res.psi_se, None, False, res.message or "not converged")
    return ReplicationResult(rep_index, out)


def _run_one(args):
    config, r = args
    return run_replication(config, r)


# --------------------------------------------------------------------------
# summaries


@dataclass
class EstimatorSummary:
    kind: str
    n_ok: int
    n_failed: int
    mean_estimate: Optional[float]
    sd_estimates: Optional[float]
    se_mean: Optional[float]
    abs_bias: Optional[float]
    coverage: Optional[float]
    mean_se: Optional[float]


@dataclass
class StudySummary:
    config: StudyConfig
    estimators: dict  # kind -> EstimatorSummary
    replications: list  # ReplicationResult, sorted by index

    def __getitem__(self, kind: str) -> EstimatorSummary:
        return self.estimators[kind]


def summarise(kind: str, records: Sequence[EstimateRecord], psi_true: float) -> EstimatorSummary:
    ok = [r for r in records if r.converged]
    n_ok, n_failed = len(ok), len(records) - len(ok)
    if n_ok == 0:
        return EstimatorSummary(kind, 0, n_failed, None, None, None, None, None, None)
    est = np.array([r.psi for r in ok])
    mean = float(np.mean(est))
    sd = float(np.std(est, ddof=1)) if n_ok > 1 else None
    return EstimatorSummary(
        kind=kind,
        n_ok=n_ok,
        n_failed=n_failed,
        mean_estimate=mean,
        sd_estimates=sd,
        se_mean=None if sd is None else sd / math.sqrt(n_ok),
        abs_bias=abs(mean - psi_true),
        coverage=sum(bool(r.covered) for r in ok) / n_ok,
        mean_se=float(np.mean([r.se for r in ok])),
    )


def aggregate(config: StudyConfig, results: Sequence[ReplicationResult]) -> StudySummary:
    results = sorted(results, key=lambda r: r.rep_index)
    summaries = {
        spec.kind: summarise(spec.kind, [r.estimates[spec.kind] for r in results], config.psi_true)
        for spec in config.estimators
    }
    return StudySummary(config, summaries, list(results))


def run_study(
    config: StudyConfig,
    progress: Optional[Callable[[int, int], None]] = None,
) -> StudySummary:
    """Run every replication (in parallel when more than one worker) and aggregate."""
    n_workers = config.resolved_workers()
    jobs = [(config, r) for r in range(config.replications)]
    results = []
    if n_workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for i, res in enumerate(pool.map(_run_one, jobs)):
                results.append(res)
                if progress:
                    progress(i + 1, config.replications)
    else:
        for i, job in enumerate(jobs):
            results.append(_run_one(job))
            if progress:
                progress(i + 1, config.replications)
    summary = aggregate(config, results)
    if config.output:
        write_report(summary, config.output)
    return summary


# --------------------------------------------------------------------------
# reports


def _opt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and not math.isfinite(x)) else _fmt(x)


def report_text(summary: StudySummary) -> str:
    cfg = summary.config
    cp = configparser.ConfigParser()
    cp["study"] = {
        "replications": str(cfg.replications),
        "master_seed": str(cfg.master_seed),
        "ci_level": _fmt(cfg.ci_level),
        "psi_true": _fmt(cfg.psi_true),
        "estimators": ", ".join(e.kind for e in cfg.estimators),
    }
    cp["model"] = model_to_dict(cfg.model)
    for kind, s in summary.estimators.items():
        cp[f"summary.{kind}"] = {
            "mean_estimate": _opt(s.mean_estimate),
            "sd_estimates": _opt(s.sd_estimates),
            "se_mean": _opt(s.se_mean),
            "abs_bias": _opt(s.abs_bias),
            "coverage": _opt(s.coverage),
            "mean_se": _opt(s.mean_se),
            "n_ok": str(s.n_ok),
            "n_failed": str(s.n_failed),
        }
    for spec in cfg.estimators:
        sec = {}
        for r in summary.replications:
            e = r.estimates[spec.kind]
            cov = "NA" if e.covered is None else str(int(e.covered))
            sec[f"rep{r.rep_index:05d}"] = f"{_opt(e.psi)} {_opt(e.se)} {cov} {int(e.converged)}"
        cp[f"replications.{spec.kind}"] = sec
    buf = io.StringIO()
    buf.write("# Monte Carlo report; replication lines are: psi_hat se covered converged\n")
    cp.write(buf)
    return buf.getvalue()


def write_report(summary: StudySummary, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(report_text(summary))


def read_report(path) -> dict:
    """Parse a report back into {section: {key: value}} with numbers converted."""
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)

    def conv(v):
        if v == "NA":
            return None
        try:
            return int(v)
        except ValueError:
            try:
                return float(v)
            except ValueError:
                return v

    out = {}
    for sec in cp.sections():
        if sec.startswith("summary."):
            out[sec] = {k: conv(v) for k, v in cp[sec].items()}
        else:
            out[sec] = dict(cp[sec])
    return out


def write_replications_csv(summary: StudySummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "estimator", "psi_hat", "se", "covered", "converged", "message"])
        for r in summary.replications:
            for spec in summary.config.estimators:
                e = r.estimates[spec.kind]
                w.writerow([
                    r.rep_index, spec.kind, _opt(e.psi), _opt(e.se),
                    "" if e.covered is None else int(e.covered), int(e.converged), e.message,
                ])


def format_summary(summary: StudySummary) -> str:
    """Table-1 style block, one column per estimator."""
    kinds = list(summary.estimators)
    rows = [
        ("Mean estimate", "mean_estimate"),
        ("S.D. of estimates", "sd_estimates"),
        ("S.D. of the mean estimate", "se_mean"),
        ("Absolute bias", "abs_bias"),
        ("Coverage", "coverage"),
        ("Mean reported SE", "mean_se"),
        ("Failed replications", "n_failed"),
    ]
    head = f"{summary.config.model.model_id}, true parameter = {_fmt(summary.config.psi_true)}"
    lines = [head, f"{'':28s}" + "".join(f"{k:>20s}" for k in kinds)]
    for label, attr in rows:
        vals = []
        for k in kinds:
            v = getattr(summary.estimators[k], attr)
            vals.append(f"{'NA':>20s}" if v is None else (f"{v:>20d}" if isinstance(v, int) else f"{v:>20.4f}"))
        lines.append(f"{label:28s}" + "".join(vals))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ignorability diagnostic on simulated data


def run_diagnostic(model: ModelConfig, seed: int, k: int = 2, m: int = 4) -> tuple[DiagnosticTable, DiagnosticTable]:
    """Both diagnostic regressions on one simulated dataset, using the true Y0."""
    paths = generate_dataset(model, seed)
    panel = panel_from_paths(paths)
    idx = [model.grid.index(t) for t in range(panel.k_max + 1)]
    y0 = np.stack([p.y0[idx] for p in paths])
    return (
        ignorability_diagnostic(panel, y0, k, m, with_future_control=False),
        ignorability_diagnostic(panel, y0, k, m, with_future_control=True),
    )


def format_diagnostic(without: DiagnosticTable, with_: DiagnosticTable, n: Optional[int] = None) -> str:
    """Two-column layout: future-outcome coefficients and p-values per regression."""

    def cell(table, name, attr):
        try:
            row = table.row(name)
        except KeyError:
            return ""
        v = getattr(row, attr)
        if attr == "p_value":
            return f"{v:.3g}" if np.isfinite(v) else "NA"
        return f"{v:.4f}"

    lines = [
        f"Ignorability diagnostic at k={without.k}, m={without.m}" + (f", n={n}" if n else ""),
        f"{'':12s}{'without future control':>26s}{'with future control':>26s}",
    ]
    for label, name in (("beta7", "y0_next"), ("beta8", "y0_m")):
        lines.append(f"{label:12s}{cell(without, name, 'estimate'):>26s}{cell(with_, name, 'estimate'):>26s}")
        lines.append(f"{'  p-value':12s}{cell(without, name, 'p_value'):>26s}{cell(with_, name, 'p_value'):>26s}")
    if without.separation or with_.separation:
        lines.append("warning: separation in at least one fit; standard errors reported as inf")
    return "\n".join(lines)
