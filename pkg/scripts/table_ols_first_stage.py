"""Cross-fitted estimator with an OLS first stage (all instruments) against the
LASSO first stage, K=5.

    python3 scripts/table_ols_first_stage.py --reps 500 --n-splits 100 --threads 8
"""

from __future__ import annotations

import argparse
import logging
import os

from ablasso import DgpConfig, EstimatorSpec, monte_carlo


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--N", type=int, default=200)
    ap.add_argument("--T", type=int, nargs="+", default=[30, 40, 50])
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--n-splits", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--outdir", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    os.makedirs(args.outdir, exist_ok=True)
    specs = [EstimatorSpec("ab-ols-ss", K=5, n_splits=args.n_splits, label="AB-OLS-SS"),
             EstimatorSpec("ab-lasso-ss", K=5, n_splits=args.n_splits, label="AB-LASSO-SS")]
    for T in args.T:
        mc = monte_carlo(DgpConfig(), args.N, T, specs, args.reps, master_seed=args.seed + T, workers=args.threads)
        path = os.path.join(args.outdir, f"ols_first_stage_N{args.N}_T{T}.csv")
        with open(path, "w") as fh:
            fh.write(mc.to_csv())
        logging.info("T=%d\n%s", T, mc.to_csv())


if __name__ == "__main__":
    main()
