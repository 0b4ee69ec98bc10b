"""Held-out discriminator BCE after VAT training on an unshifted task.

With no subset shift the discriminator cannot tell pairs apart, so its BCE on
unseen pairs should sit near ln 2. Usage: python scripts/equilibrium.py [--seeds 5]
"""

import argparse
import math

import numpy as np

from vatlab.data import SyntheticTaskSpec, gen_shapes_task
from vatlab.vat import VatConfig, fit, heldout_discriminator_bce


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--lam", type=float, default=1.0)
    parser.add_argument("--n-tr", type=int, default=128)
    args = parser.parse_args()
    values = []
    for seed in range(args.seeds):
        splits = gen_shapes_task(SyntheticTaskSpec(shift=0.0, n_tr=args.n_tr, n_val=256, n_pre=1024, n_test=256, seed=seed))
        state, _ = fit(splits, VatConfig(lam=args.lam, batch_size=8, max_epochs=300, patience=50, seed=seed, track_feature_gap=False))
        values.append(heldout_discriminator_bce(state.model, splits.val, splits.val, splits.test, 2000, seed))
        print(f"seed {seed}: held-out BCE {values[-1]:.4f}", flush=True)
    print(f"mean {np.mean(values):.4f} (ln 2 = {math.log(2):.4f})")


if __name__ == "__main__":
    main()
