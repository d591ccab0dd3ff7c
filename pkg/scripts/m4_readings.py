#!/usr/bin/env python3
"""Compare readings of the M4 regime rule.

For each (thresholded process, treatment state) pair, report z statistics
of the diagnostic regressions at n=10000 and the modified /
controlling-the-future means over a few datasets.
"""
import argparse
import sys

import numpy as np

from ctgest.dgp import ModelConfig, generate_dataset
from ctgest.estimators import EstimatorSpec, ignorability_diagnostic, solve
from ctgest.panel import panel_from_paths
from ctgest.propensity import default_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--seeds", type=int, default=6)
    args = ap.parse_args()
    for on in ("y", "l"):
        for state in ("current", "target"):
            cfg = ModelConfig(model_id="M4", n_subjects=args.n, m4_regime_on=on, m4_regime_state=state)
            z, est = [], []
            for seed in range(100, 100 + args.seeds):
                panel = panel_from_paths(generate_dataset(cfg, seed))
                y0 = panel.y - cfg.causal.psi * panel.cum_a
                t0 = ignorability_diagnostic(panel, y0, 2, 4, False)
                t1 = ignorability_diagnostic(panel, y0, 2, 4, True)
                z.append((t0.row("y0_m").z, t1.row("y0_next").z, t1.row("y0_m").z))
                est.append([
                    solve(panel, EstimatorSpec(default_spec(k, has_l=True))).psi
                    for k in ("modified", "controlling_future")
                ])
            z, est = np.array(z), np.array(est)
            print(
                f"{on}/{state:8s} z(b8 | no ctrl) {np.round(z[:, 0], 1)}  z(b7 | ctrl) {np.round(z[:, 1], 1)}"
                f"  z(b8 | ctrl) {np.round(z[:, 2], 1)}  modified {est[:, 0].mean():.3f}  ctrl-future {est[:, 1].mean():.3f}",
                flush=True,
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
