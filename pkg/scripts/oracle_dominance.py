"""Compare optimize against exhaustive lattice search on seeded random problems.

    python scripts/oracle_dominance.py --instances 20 --n 3 --step 0.01
"""
import argparse
import time

import numpy as np

from mpf.core import HyperParams
from mpf.mitigator import grid_search_oracle, optimize
from mpf.synthetic import random_instance

SETTINGS = (
    dict(alpha=0.0, beta=1.0, lambda_kl=0.2, lambda_cal=0.8),
    dict(alpha=0.5, beta=0.5, lambda_kl=0.2, lambda_cal=0.8),
    dict(alpha=0.0, beta=0.0, lambda_kl=0.5, lambda_cal=0.5),
    dict(alpha=0.5, beta=3.0, lambda_kl=0.8, lambda_cal=0.2),
    dict(alpha=0.0, beta=0.1, lambda_kl=0.0, lambda_cal=1.0),
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--instances", type=int, default=20)
    parser.add_argument("--n", type=int, default=3)
    parser.add_argument("--bins", type=int, default=10)
    parser.add_argument("--d", type=int, default=10)
    parser.add_argument("--step", type=float, default=0.01)
    args = parser.parse_args()

    print(f"{'alpha':>6}{'beta':>6}{'l_kl':>6}{'l_cal':>6}{'max gap':>12}{'mean gap':>12}{'sec':>8}")
    for setting in SETTINGS:
        gaps = []
        start = time.perf_counter()
        for seed in range(args.instances):
            inst = random_instance(seed, n=args.n, bins=args.bins, d=args.d)
            hp = HyperParams(**setting, rng_seed=seed)
            _, oracle = grid_search_oracle(*inst.args, hp, step=args.step)
            gaps.append(optimize(*inst.args, hp).objective_value - oracle)
        elapsed = time.perf_counter() - start
        s = setting
        print(f"{s['alpha']:>6}{s['beta']:>6}{s['lambda_kl']:>6}{s['lambda_cal']:>6}"
              f"{max(gaps):>12.2e}{np.mean(gaps):>12.2e}{elapsed:>8.2f}")
    print("negative gaps mean optimize found a point below the best lattice point")


if __name__ == "__main__":
    main()
