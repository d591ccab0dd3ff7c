#!/usr/bin/env python3
"""Reproduce the estimator comparison table for M1-M4.

Desk scale (default) runs configs/m{1..4}.cfg; ``--scale full`` runs the
n=5000, R=1000 configs. Reports and per-replication CSVs go to --outdir.

    python scripts/table1.py --outdir results
    CTGEST_WORKERS=8 python scripts/table1.py --scale full --outdir results_full
"""
import argparse
import os
import sys
import time

from ctgest.mc_harness import format_summary, load_config, run_study, write_replications_csv

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIGS = os.path.join(HERE, "..", "configs")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", choices=("desk", "full"), default="desk")
    ap.add_argument("--models", default="m1,m2,m3,m4")
    ap.add_argument("--replications", type=int, help="override R")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--outdir", default="results")
    args = ap.parse_args()
    os.makedirs(args.outdir, exist_ok=True)
    for name in args.models.split(","):
        fname = f"{name}.cfg" if args.scale == "desk" else f"full_{name}.cfg"
        cfg = load_config(
            os.path.join(CONFIGS, fname),
            {"study.replications": args.replications, "study.master_seed": args.seed},
        )
        cfg.output = os.path.join(args.outdir, f"{name}_{args.scale}.txt")
        t0 = time.time()
        summary = run_study(cfg)
        write_replications_csv(summary, os.path.join(args.outdir, f"{name}_{args.scale}.csv"))
        print(format_summary(summary))
        print(f"({time.time() - t0:.0f} s)\n", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
