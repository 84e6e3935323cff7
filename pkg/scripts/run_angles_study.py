#!/usr/bin/env python3
"""Principal-angle stability of the contact projection over random draws."""

import argparse
import logging

from eitproj import harness

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--draws", type=int, default=None)
    ap.add_argument("--out-dir", default="results/angles")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    res = harness.angles_study(cfg, args.draws, args.out_dir)
    for row, (t, e) in res["summary"].items():
        print(f"{row:>5}  theta_max {t:8.4f} deg   err_F {e:10.4f}")
    if res["error"]:
        print("aborted:", res["error"])
