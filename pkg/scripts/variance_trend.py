"""Variance term of the error as the labelled training set grows.

Every size gets the same optimizer-step budget and keeps its final parameters;
each point averages the bootstrap variance estimate over several data seeds.
Usage: python scripts/variance_trend.py [--sizes 32,128,512] [--data-seeds 5]
"""

import argparse
import dataclasses
import math

import numpy as np

from vatlab.data import SyntheticTaskSpec, gen_shapes_task
from vatlab.diagnostics import variance_error_estimate
from vatlab.vat import VatConfig, fit


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="32,128,512")
    parser.add_argument("--data-seeds", type=int, default=5)
    parser.add_argument("--runs", type=int, default=5, help="bootstrap fits per estimate")
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--lam", type=float, default=0.0)
    args = parser.parse_args()
    batch = 8
    for n in (int(s) for s in args.sizes.split(",")):
        epochs = math.ceil(args.steps * batch / n)
        base = VatConfig(lam=args.lam, batch_size=batch, max_epochs=epochs, patience=epochs, track_feature_gap=False, restore_best=False)

        def fit_fn(splits, seed, base=base):
            state, _ = fit(splits, dataclasses.replace(base, seed=seed))
            return state.model.predict_proba

        estimates = []
        for data_seed in range(args.data_seeds):
            splits = gen_shapes_task(SyntheticTaskSpec(shift=0.0, n_tr=n, n_val=16, n_pre=16, n_test=256, seed=data_seed))
            estimates.append(variance_error_estimate(fit_fn, splits, n_runs=args.runs, seed=data_seed))
        print(f"|X_tr|={n}: mean variance {np.mean(estimates):.4f} over {args.data_seeds} data seeds", flush=True)


if __name__ == "__main__":
    main()
