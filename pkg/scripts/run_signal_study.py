#!/usr/bin/env python3
"""Norms of sigma-, zeta- and combined signals with and without projections."""

import argparse

from eitproj import harness

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out-dir", default="results/signals")
    args = ap.parse_args()

    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    norms = harness.signal_study(cfg, out_dir=args.out_dir).norms()
    print(f"{'':12}{'s(sigma)':>12}{'s(zeta)':>12}{'s(sigma,zeta)':>15}")
    for row, v in norms.items():
        print(f"{row:12}{v['s_sigma']:12.4g}{v['s_zeta']:12.4g}{v['s_combined']:15.4g}")
