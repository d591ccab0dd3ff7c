"""Command-line entry point: ``ctgest {simulate,estimate,montecarlo,diagnose}``.

Exit codes: 0 success, 1 configuration or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import configparser
import io
import logging
import sys
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .dgp import MODEL_IDS, ModelConfig, generate_dataset
from .estimators import EstimatorSpec, StructureError, ignorability_diagnostic, solve
from .mc_harness import (
    ConfigError,
    format_diagnostic,
    format_summary,
    load_config,
    model_from_dict,
    run_diagnostic,
    run_study,
    write_replications_csv,
)
from .panel import PanelError, PanelSchema, panel_from_paths, read_panel_csv, write_panel_csv
from .propensity import KINDS, SpecError, default_spec
from .sde_sim import ParameterError

log = logging.getLogger("ctgest")

DATA_ERRORS = (ConfigError, PanelError, SpecError, ParameterError, StructureError, ValueError, OSError)


def _model_from_args(args) -> ModelConfig:
    if args.config:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {args.config}: {exc}") from exc
        section = dict(cp["model"]) if cp.has_section("model") else {}
    else:
        section = {}
    if getattr(args, "model", None):
        section["model_id"] = args.model
    if getattr(args, "n", None) is not None:
        section["n_subjects"] = str(args.n)
    return model_from_dict(section)


def _write_trace(path, model: ModelConfig, paths) -> None:
    p = paths[0]
    cols = {"t": model.grid.points, "y0": p.y0, "y": p.y, "a": p.a.astype(int), "cum_a": p.cum_a}
    if p.l_minus is not None:
        cols["l"] = p.l_minus
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")


def cmd_simulate(args) -> int:
    model = _model_from_args(args)
    paths = generate_dataset(model, args.seed)
    panel = panel_from_paths(paths)
    write_panel_csv(panel, args.out)
    if args.trace:
        _write_trace(args.trace, model, paths)
    print(f"wrote {panel.n_subjects} subjects x {panel.k_max + 1} visits ({model.model_id}) to {args.out}")
    return 0


def _schema_from_args(args) -> PanelSchema:
    relaxed = args.layout == "application" or args.offset_exposure
    return PanelSchema(
        id=args.id_col,
        visit=args.visit_col,
        y=args.y_col,
        a=args.a_col,
        cum_a=args.cum_a_col,
        l_prefix=args.l_prefix,
        v_prefix=args.v_prefix,
        zero_start=not relaxed,
        max_increment=None if relaxed else 1.0,
    )


def _kinds(selected: Optional[Sequence[str]]) -> list[str]:
    if not selected or "all" in selected:
        return list(KINDS)
    out = []
    for k in selected:
        if k not in out:
            out.append(k)
    return out


def cmd_estimate(args) -> int:
    panel = read_panel_csv(args.panel, _schema_from_args(args))
    if panel.n_subjects == 0:
        raise PanelError(f"{args.panel} holds no subjects")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["panel"] = {
        "path": str(args.panel),
        "layout": args.layout,
        "n_subjects": str(panel.n_subjects),
        "n_visits": str(panel.k_max + 1),
    }
    status = 0
    for kind in _kinds(args.estimator):
        spec = EstimatorSpec(default_spec(kind, layout=args.layout, has_l=bool(panel.l_names)))
        res = solve(panel, spec)
        cp[f"estimate.{kind}"] = {k: _text(v) for k, v in res.report().items()}
        if not res.converged:
            status = 1
    text = _dump(cp)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    if status:
        print("error: at least one estimator did not converge", file=sys.stderr)
    return status


def _text(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "NA"
    return str(v)


def _dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def cmd_montecarlo(args) -> int:
    overrides = {
        "study.master_seed": args.seed,
        "study.replications": args.replications,
        "study.workers": args.workers,
        "model.n_subjects": args.n,
    }
    config = load_config(args.config, overrides)
    if args.out:
        config.output = args.out

    def progress(done, total):
        if not args.quiet and (done == total or done % max(1, total // 10) == 0):
            print(f"  {done}/{total} replications", file=sys.stderr)

    summary = run_study(config, progress=progress)
    if args.csv:
        write_replications_csv(summary, args.csv)
    print(format_summary(summary))
    if config.output:
        print(f"report written to {config.output}")
    return 0


def cmd_diagnose(args) -> int:
    if args.panel:
        panel = read_panel_csv(args.panel, _schema_from_args(args))
        if args.y0_col:
            df = pd.read_csv(args.panel, float_precision="round_trip").sort_values([args.id_col, args.visit_col])
            if args.y0_col not in df:
                raise PanelError(f"column {args.y0_col!r} not in {args.panel}")
            order = {sid: i for i, sid in enumerate(panel.ids)}
            y0 = np.empty_like(panel.y)
            for sid, grp in df.groupby(args.id_col, sort=False):
                y0[order[sid]] = grp[args.y0_col].to_numpy(dtype=float)
        else:
            y0 = panel.y - args.psi * panel.cum_a
        without = ignorability_diagnostic(panel, y0, args.k, args.m, with_future_control=False)
        with_ = ignorability_diagnostic(panel, y0, args.k, args.m, with_future_control=True)
        n = panel.n_subjects
    else:
        if not args.config:
            args.model = args.model or "M4"
            args.n = 10000 if args.n is None else args.n
        model = _model_from_args(args)
        without, with_ = run_diagnostic(model, args.seed, args.k, args.m)
        n = model.n_subjects
    text = format_diagnostic(without, with_, n)
    if args.full:
        for table, label in ((without, "without future control"), (with_, "with future control")):
            text += f"\n\n{label}:\n" + "\n".join(
                f"  {r.name:16s} {r.estimate:>12.5f} {r.se:>10.5f} {r.z:>8.3f} {r.p_value:>10.3g}" for r in table.rows
            )
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("panel schema")
    g.add_argument("--id-col", default="id")
    g.add_argument("--visit-col", default="visit")
    g.add_argument("--y-col", default="y")
    g.add_argument("--a-col", default="a")
    g.add_argument("--cum-a-col", default="cum_a")
    g.add_argument("--l-prefix", default="l_", help="prefix of time-varying covariate columns")
    g.add_argument("--v-prefix", default="v_", help="prefix of baseline covariate columns")
    g.add_argument(
        "--offset-exposure",
        action="store_true",
        help="cum_a may start above 0 and grow by more than one time unit per visit",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctgest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a model and write the visit panel as CSV")
    p.add_argument("--config", help="INI file; its [model] section is used")
    p.add_argument("--model", choices=MODEL_IDS, help="model id (overrides the config)")
    p.add_argument("--n", type=int, help="number of subjects (overrides the config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="panel CSV to write")
    p.add_argument("--trace", help="also write subject 0's continuous path to this CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="fit g-estimators to a panel CSV")
    p.add_argument("--panel", required=True)
    p.add_argument(
        "--estimator",
        action="append",
        choices=list(KINDS) + ["all"],
        help="repeatable; default: all three",
    )
    p.add_argument("--layout", choices=("simulation", "application"), default="simulation")
    p.add_argument("--out", help="also write the report here")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("montecarlo", help="run a Monte Carlo study from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="master seed (overrides [study] master_seed)")
    p.add_argument("--out", help="report path (overrides [study] output)")
    p.add_argument("--csv", help="per-replication estimates CSV")
    p.add_argument("--replications", type=int)
    p.add_argument("--n", type=int, help="subjects per replication")
    p.add_argument("--workers", type=int, help="parallel workers (default: $CTGEST_WORKERS or 1)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("diagnose", help="regression check of discrete-time ignorability")
    p.add_argument("--config", help="INI file; its [model] section is used")
    p.add_argument("--model", choices=MODEL_IDS, help="model id (default M4 without --config)")
    p.add_argument("--n", type=int, help="subjects (default 10000 without --config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--panel", help="use this panel CSV instead of simulating")
    p.add_argument("--psi", type=float, default=0.0, help="effect used to form Y0* for --panel")
    p.add_argument("--y0-col", help="column of --panel holding the untreated outcome")
    p.add_argument("--layout", choices=("simulation", "application"), default="simulation")
    p.add_argument("--full", action="store_true", help="print every coefficient")
    p.add_argument("--out")
    _add_schema_flags(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
