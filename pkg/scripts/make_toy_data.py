#!/usr/bin/env python3
"""Write toy benchmark sites to disk as dataset directories.

Each site becomes ``<out>/<site-id>/`` with a manifest, 16-bit grayscale
images, and 8-bit mask files — the directory format every CLI subcommand
accepts via ``--dataset``. Example:

    python scripts/make_toy_data.py --out data --sites 2
    synfed experiment run configs/toy2site.toml
"""

from __future__ import annotations

import argparse
from pathlib import Path

from synfed.core import save_dataset
from synfed.toybench import FAMILY_SIZE, make_toy_site


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("data"),
                        help="parent directory for the site folders (default: data)")
    parser.add_argument("--sites", type=int, default=2,
                        help=f"number of family members to write, 1..{FAMILY_SIZE} "
                             "(default: 2)")
    parser.add_argument("--seed", type=int, default=0,
                        help="sampling seed shared by all sites (default: 0)")
    parser.add_argument("--patients", type=int, default=10,
                        help="patients per site (default: 10)")
    parser.add_argument("--images-per-patient", type=int, default=2,
                        help="labeled images per patient (default: 2)")
    args = parser.parse_args()

    if not 1 <= args.sites <= FAMILY_SIZE:
        parser.error(f"--sites must be in 1..{FAMILY_SIZE}")

    for index in range(args.sites):
        dataset = make_toy_site(index, seed=args.seed, n_patients=args.patients,
                                images_per_patient=args.images_per_patient)
        target = save_dataset(dataset, args.out / dataset.site_id)
        n_images = sum(len(p.items) for p in dataset.patients)
        print(f"wrote {dataset.site_id}: {len(dataset.patients)} patients, "
              f"{n_images} images -> {target}")


if __name__ == "__main__":
    main()
