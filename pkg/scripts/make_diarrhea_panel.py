#!/usr/bin/env python3
"""Generate the bundled synthetic three-visit panel with the diarrhea-study schema.

The real survey data are not public, so this script fabricates a panel with
the same layout: 224 children, visits 1..3 six months apart, height in cm,
a = diarrhea in the two weeks before the visit, cum_a = days with diarrhea
since a start date 120 days before the first visit, baseline covariates
(age in months, mother's height, flood exposure) and time-varying
covariates (arm circumference, weight-for-age z-score and four household
indicators).

Days with diarrhea follow a daily two-state chain whose onset probability
rises with the child's current height deficit (time-varying confounding);
every sick day lowers height by ``--psi`` cm.

    python scripts/make_diarrhea_panel.py --out src/ctgest/data/diarrhea_synthetic.csv
"""
import argparse

import numpy as np
import pandas as pd

PRE_DAYS = 120
GAP_DAYS = 182
RECALL_DAYS = 14


def simulate(n: int, psi: float, seed: int) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    age0 = rng.uniform(36, 60, n)  # months at first visit
    mother_h = rng.normal(150.0, 5.0, n)
    flood = rng.random(n) < 0.5
    toilet_sealed = rng.random(n) < 0.3
    garbage_fixed = rng.random(n) < 0.4
    water_filter = rng.random(n) < 0.25
    tube_well = rng.random(n) < 0.7
    # child-specific growth potential
    frailty = rng.normal(0.0, 1.0, n)
    base_h = 75.0 + 0.45 * age0 + 0.25 * (mother_h - 150.0) - 1.5 * frailty  # frail children are shorter

    n_days = PRE_DAYS + 2 * GAP_DAYS + 1
    visit_days = np.array([PRE_DAYS, PRE_DAYS + GAP_DAYS, PRE_DAYS + 2 * GAP_DAYS])
    growth = 0.55 / 30.4  # cm per day
    sick = np.zeros((n, n_days), dtype=bool)
    cum = np.zeros((n, n_days))
    deficit = np.zeros((n, n_days))
    wobble = np.zeros((n, n_days))
    logit0 = -4.6 + 0.5 * flood - 0.4 * toilet_sealed - 0.3 * water_filter - 0.2 * tube_well
    state = np.zeros(n, dtype=bool)
    for d in range(n_days):
        prev = wobble[:, d - 1] if d else rng.normal(0.0, 0.5, n)
        wobble[:, d] = 0.995 * prev + 0.05 * rng.standard_normal(n)
        # height shortfall relative to the child's expected path
        deficit[:, d] = frailty - wobble[:, d] + 0.02 * cum[:, d]
        p_on = 1.0 / (1.0 + np.exp(-(logit0 + 0.35 * deficit[:, d])))
        u = rng.random(n)
        state = np.where(state, u > 0.22, u < p_on)
        sick[:, d] = state
        if d + 1 < n_days:
            cum[:, d + 1] = cum[:, d] + state

    rows = []
    for k, day in enumerate(visit_days, start=1):
        recent = sick[:, max(0, day - RECALL_DAYS) : day].any(axis=1)
        height = (
            base_h
            + growth * (day - PRE_DAYS)
            + 0.6 * wobble[:, day]
            + psi * cum[:, day]
            + rng.normal(0.0, 0.3, n)
        )
        muac = 14.5 - 0.25 * frailty + 0.3 * rng.standard_normal(n) - 0.02 * cum[:, day]
        waz = -1.8 - 0.4 * deficit[:, day] + 0.5 * rng.standard_normal(n)
        for i in range(n):
            rows.append(
                {
                    "id": i + 1,
                    "visit": k,
                    "y": round(float(height[i]), 2),
                    "a": int(recent[i]),
                    "cum_a": int(cum[i, day]),
                    "l_muac": round(float(muac[i]), 2),
                    "l_waz": round(float(waz[i]), 2),
                    "l_toilet_sealed": int(toilet_sealed[i]),
                    "l_garbage_fixed": int(garbage_fixed[i]),
                    "l_water_filter": int(water_filter[i]),
                    "l_cookwater_tube": int(tube_well[i]),
                    "v_age_months": round(float(age0[i]), 1),
                    "v_mother_height": round(float(mother_h[i]), 1),
                    "v_flood": int(flood[i]),
                }
            )
    return pd.DataFrame(rows).sort_values(["id", "visit"]).reset_index(drop=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=224)
    ap.add_argument("--psi", type=float, default=-0.05, help="cm of height lost per sick day")
    ap.add_argument("--seed", type=int, default=1998)
    ap.add_argument("--out", default="src/ctgest/data/diarrhea_synthetic.csv")
    args = ap.parse_args()
    df = simulate(args.n, args.psi, args.seed)
    df.to_csv(args.out, index=False)
    share = df.groupby("visit")["a"].mean().round(3).to_dict()
    print(f"wrote {df['id'].nunique()} children x 3 visits to {args.out}; share with recent diarrhea by visit: {share}")


if __name__ == "__main__":
    main()
