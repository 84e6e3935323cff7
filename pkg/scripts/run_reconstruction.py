#!/usr/bin/env python3
"""Difference reconstructions with and without contact projections, plus slices."""

import argparse

from eitproj import harness

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out-dir", default="results/reconstruction")
    args = ap.parse_args()

    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    lin = harness.linearize(cfg, kinds=("sigma",))
    results = harness.reconstruct(cfg, lin=lin, out_dir=args.out_dir)
    for name, res in results.items():
        loc = harness.localization(lin.mesh, res.w, cfg)
        print(f"{name:10} centroid offset {1e3 * loc['distance']:6.1f} mm   background {loc['background']:.3e}")
