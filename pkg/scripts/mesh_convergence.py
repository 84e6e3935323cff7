#!/usr/bin/env python3
"""Patch-area and volume errors of the generated tank across refinement levels."""

import argparse
import math

from eitproj.mesh import ElectrodeSpec, generate_cylinder_tank

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--electrodes", type=int, default=32)
    ap.add_argument("--levels", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    radius, height, R = 0.115, 0.043, 0.005
    print(f"{'level':>5}{'nodes':>9}{'patch dev':>12}{'worst patch':>13}{'volume err':>12}")
    for level in args.levels:
        mesh, layout = generate_cylinder_tank(radius, height, ElectrodeSpec(args.electrodes, R), refinement_level=level)
        areas = layout.patch_areas(mesh) / (math.pi * R * R)
        total = abs(areas.mean() - 1)
        vol = abs(mesh.volume / (math.pi * radius**2 * height) - 1)
        print(f"{level:5d}{mesh.n_nodes:9d}{total:12.2e}{abs(areas - 1).max():13.2e}{vol:12.2e}")
