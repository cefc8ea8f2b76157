#!/usr/bin/env python3
"""Measure how the cross-site advantage of synthetic-data sharing grows with
the number of participating sites.

For each federation size N the first N toy sites pool their filtered
synthetic bundles, a general model is pretrained on the pool and fine-tuned
at every participant, and both it and the purely local baselines are scored
on every other participant's test folds. Example:

    python scripts/run_scaling_study.py --counts 2,4,8
"""

from __future__ import annotations

import argparse

from synfed.federation import FederationConfig, run_scaling_study
from synfed.toybench import FAMILY_SIZE, make_toy_family


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--counts", default="2,4,8",
                        help="comma-separated federation sizes (default: 2,4,8)")
    parser.add_argument("--sites", type=int, default=None,
                        help="toy sites to generate (default: the largest count)")
    parser.add_argument("--seed", type=int, default=0,
                        help="master seed for splits, training, and sampling")
    args = parser.parse_args()

    counts = sorted({int(c) for c in args.counts.split(",") if c.strip()})
    n_sites = args.sites if args.sites is not None else counts[-1]
    if not 2 <= n_sites <= FAMILY_SIZE:
        parser.error(f"--sites must be in 2..{FAMILY_SIZE}")

    datasets = make_toy_family(n_sites, seed=args.seed)
    config = FederationConfig(sites=tuple(datasets), seed=args.seed)
    points = run_scaling_study(datasets, config, site_counts=counts)

    header = f"{'sites':>5}  {'syn-real DS':>11}  {'real DS':>8}  {'delta':>7}  fold wins"
    print(header)
    print("-" * len(header))
    for p in points:
        print(f"{p.n_sites:>5}  {p.mean_synreal_ds:>11.2f}  {p.mean_real_ds:>8.2f}  "
              f"{p.mean_delta_ds:>+7.2f}  {p.fold_wins}/{len(p.fold_deltas)}")


if __name__ == "__main__":
    main()
