"""Command-line entry point: ``python -m eitproj <command> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit codes: 0 on success, 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .errors import ConfigError, DomainError, NumericError, ResourceError
from .mesh import save_mesh
from .reconstruct import slice_samples, write_slice
from .sensitivity import KINDS, save_jacobian

log = logging.getLogger("eitproj")


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_mesh_gen(cfg, args, out: Path) -> None:
    levels = [args.level] if args.level is not None else sorted({cfg.tank.inverse_level, cfg.tank.data_level})
    for level in levels:
        mesh, layout = harness.tank_mesh(cfg.tank, level)
        path = out / f"tank_level{level}.json"
        save_mesh(path, mesh, layout)
        log.info("level %d: %d nodes, %d tets -> %s", level, mesh.n_nodes, mesh.n_tets, path)


def cmd_simulate(cfg, args, out: Path) -> None:
    harness.simulate(cfg, out)
    log.info("measurements written to %s", out)


def cmd_jacobian(cfg, args, out: Path) -> None:
    kinds = KINDS if args.kind == "all" else (args.kind,)
    lin = harness.linearize(cfg.replace(projections=("none",)), kinds=kinds)
    for k in kinds:
        side = save_jacobian(out / f"jacobian_{k}", lin.blocks[k], args.format)
        log.info("J_%s %s -> %s", k, lin.blocks[k].matrix.shape, side)


def cmd_project(cfg, args, out: Path) -> None:
    lin = harness.linearize(cfg.replace(projections=(args.kind,)), kinds=())
    op = lin.projections[args.kind]
    if op is None:
        raise ConfigError("projection kind 'none' has nothing to write")
    np.save(out / f"projection_{args.kind}_basis.npy", op.basis)
    info = {"name": op.name, "kinds": list(op.kinds), "dim": op.dim, "rank": op.rank, "condition": op.condition}
    (out / f"projection_{args.kind}.json").write_text(json.dumps(info, indent=2))
    log.info("%s: rank %d of %d (condition %.3g)", op.name, op.rank, op.dim, op.condition)


def cmd_angles_study(cfg, args, out: Path) -> int:
    res = harness.angles_study(cfg, args.draws, out)
    if res["summary"]:
        t, e = res["summary"]["max"], res["summary"]["mean"]
        log.info("max theta_max %.4g deg, mean err_F %.4g", t[0], e[1])
    if res["error"]:
        log.error("study aborted after %d draws: %s", res["theta_max"].size, res["error"])
        return 3
    return 0


def cmd_signal_study(cfg, args, out: Path) -> None:
    data = harness.read_simulation(args.data) if args.data else None
    bundle = harness.signal_study(cfg, data, out_dir=out)
    for row, vals in bundle.norms().items():
        log.info("%-12s %s", row, "  ".join(f"{k}={v:.4g}" for k, v in vals.items()))


def cmd_reconstruct(cfg, args, out: Path) -> None:
    data = harness.read_simulation(args.data) if args.data else None
    lin = harness.linearize(cfg, kinds=("sigma",))
    results = harness.reconstruct(cfg, data, lin, out)
    for name, res in results.items():
        extra = ""
        if cfg.inclusion is not None:
            loc = harness.localization(lin.mesh, res.w, cfg)
            extra = f", centroid offset {1e3 * loc['distance']:.1f} mm"
        log.info("%s: |w|max %.4g%s", name, np.abs(res.w).max(), extra)


def cmd_slice(cfg, args, out: Path) -> None:
    data = np.loadtxt(args.input, delimiter=",", skiprows=1, ndmin=2)
    mesh, _ = harness.tank_mesh(cfg.tank, cfg.tank.inverse_level)
    values = np.zeros(mesh.n_nodes)
    if data.shape[0] != mesh.n_nodes:
        raise ConfigError(f"{args.input} has {data.shape[0]} values for {mesh.n_nodes} nodes")
    values[data[:, 0].astype(int)] = data[:, 1]
    for z in args.z:
        path = out / f"{Path(args.input).stem}_z{z:g}.csv"
        write_slice(path, slice_samples(mesh, values, z, cfg.slice_spacing))
        log.info("slice z=%g -> %s", z, path)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before and after the subcommand; the subcommand copy
    # must not overwrite values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="YAML or JSON experiment description")
    common.add_argument("--seed", type=int, default=d(None), help="override the configured seed")
    common.add_argument("--out-dir", default=d("."), help="output directory (default: current)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="eitproj", description=__doc__.splitlines()[0], parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", parents=[common], help="write tank meshes as JSON")
    p.add_argument("--level", type=int, help="single refinement level (default: data and inversion levels)")
    p.set_defaults(func=cmd_mesh_gen)

    p = sub.add_parser("simulate", parents=[common], help="simulate the four measurement sets")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("jacobian", parents=[common], help="Jacobians at the reference point")
    p.add_argument("--kind", choices=(*KINDS, "all"), default="all")
    p.add_argument("--format", choices=("npy", "csv"), default="npy")
    p.set_defaults(func=cmd_jacobian)

    p = sub.add_parser("project", parents=[common], help="build a nuisance projection")
    p.add_argument("--kind", choices=[k for k in harness.PROJECTION_KINDS if k != "none"], default="zeta")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("angles-study", parents=[common], help="principal-angle stability under random draws")
    p.add_argument("--draws", type=int, help="number of draws (default: config n_draws)")
    p.set_defaults(func=cmd_angles_study)

    p = sub.add_parser("signal-study", parents=[common], help="signal norms with and without projections")
    p.add_argument("--data", help="directory with the four measurement CSVs (default: simulate)")
    p.set_defaults(func=cmd_signal_study)

    p = sub.add_parser("reconstruct", parents=[common], help="projected difference reconstructions")
    p.add_argument("--data", help="directory with the four measurement CSVs (default: simulate)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("slice", parents=[common], help="horizontal slices of a node,value CSV")
    p.add_argument("input", help="reconstruction CSV on the inversion mesh")
    p.add_argument("--z", type=float, nargs="+", required=True, help="slice heights (m)")
    p.set_defaults(func=cmd_slice)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        status = args.func(cfg, args, out)
    except (ConfigError, DomainError, FileNotFoundError) as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (NumericError, ResourceError) as exc:
        log.error("numerical failure: %s", exc)
        return 3
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
