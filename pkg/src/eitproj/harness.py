"""Experiment pipelines on synthetic tank phantoms.

Everything here is a pure function of an :class:`ExperimentConfig` (which
carries the seed) and, where applicable, input files.  Data are simulated on
a finer mesh (``tank.data_level``) than the one used for Jacobians and
inversion (``tank.inverse_level``) so the reconstructions do not profit from
an identical discretization.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import ConfigError, EITError
from .forward import (
    PATTERN_KINDS,
    ContactState,
    assemble,
    make_patterns,
    measure,
    read_measurements,
    solve,
    write_measurements,
)
from .mesh import ElectrodeSpec, generate_cylinder_tank
from .projection import (
    build_projection,
    frobenius_discrepancy,
    signal_bundle,
    theta_max,
    write_angles_report,
    write_norms_table,
)
from .reconstruct import build_problem, lagged_diffusivity, one_step, slice_samples, write_reconstruction, write_slice
from .regularization import DEFAULT_T, make_regularizer
from .sampling import RandomDrawConfig, draw_contacts, draw_lognormal_field, make_noise
from .sensitivity import jacobian_position, jacobian_sigma, jacobian_zeta

PROJECTION_KINDS = {
    "none": (),
    "zeta": ("zeta",),
    "zeta_phi": ("zeta", "phi"),
    "zeta_theta_phi": ("zeta", "theta", "phi"),
}
ALGORITHMS = ("one_step", "lagged_diffusivity")
MEASUREMENT_FILES = {
    "u00": "U_sigma0_zeta0.csv",
    "u_s0": "U_sigma_zeta0.csv",
    "u_0z": "U_sigma0_zeta.csv",
    "u_sz": "U_sigma_zeta.csv",
}


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TankConfig:
    radius: float = 0.115
    height: float = 0.043
    electrodes: int = 16
    electrode_radius: float = 0.005
    ring_heights: tuple | None = None
    data_level: int = 2
    inverse_level: int = 1
    max_nodes: int = 250_000

    def spec(self) -> ElectrodeSpec:
        rings = tuple(self.ring_heights) if self.ring_heights else None
        return ElectrodeSpec(self.electrodes, self.electrode_radius, rings)


@dataclass(frozen=True)
class InclusionConfig:
    """Vertical cylinder standing on the tank floor; ``height=None`` spans the water column."""

    center: tuple = (0.06, 0.0)
    radius: float = 0.015
    height: float | None = None
    conductivity: float = 4.73


@dataclass(frozen=True)
class ContactPerturbation:
    """Peak contact conductivities of ``electrodes`` (0-based) are multiplied by ``multiplier``.

    ``multiplier`` is a scalar or one factor per listed electrode.
    """

    electrodes: tuple = (0, 3, 6, 9, 12)
    multiplier: float | tuple = 0.05


@dataclass(frozen=True)
class Thresholds:
    """Pass/fail limits used by the studies and the acceptance suite."""

    angle_max_deg: float = 2.0
    err_f_min_mean: float = 0.5
    zeta_leak_max: float = 0.01
    sigma_retention_min: float = 0.3
    combined_rel_max: float = 0.02
    top_fraction: float = 0.1
    localization_radii: float = 1.0
    background_radii: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    tank: TankConfig = field(default_factory=TankConfig)
    inclusion: InclusionConfig | None = field(default_factory=InclusionConfig)
    sigma0: float = 0.0491
    zeta0: float = 500.0
    tau: float = 0.4
    contact: ContactPerturbation | None = field(default_factory=ContactPerturbation)
    patterns: str = "fourier"
    amplitude: float = 1e-3
    noise_fraction: float = 0.005
    projections: tuple = ("none", "zeta", "zeta_phi")
    algorithm: str = "one_step"
    gamma: float = 50.0
    T: float = DEFAULT_T
    n_iter: int = 10
    seed: int = 0
    slice_heights: tuple = (0.01, 0.02, 0.025, 0.035)
    slice_spacing: float = 0.002
    draws: RandomDrawConfig = field(default_factory=lambda: RandomDrawConfig(region=(0.0, 0.0, 0.08)))
    n_draws: int = 100
    thresholds: Thresholds = field(default_factory=Thresholds)

    def __post_init__(self):
        validate_config(self)

    @property
    def study_sigma0(self) -> float:
        """Reference conductivity of the angle study, the median of the log-normal law."""
        return math.exp(self.draws.log_mean)

    @property
    def study_zeta0(self) -> float:
        """Reference peak of the angle study, the mean of the contact law."""
        d = self.draws
        return d.offset + 0.5 * (d.shared_scale + d.independent_scale)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def validate_config(cfg: ExperimentConfig) -> None:
    t = cfg.tank
    if min(t.radius, t.height, t.electrode_radius) <= 0:
        raise ConfigError("tank dimensions must be positive")
    if t.inverse_level < 0 or t.data_level < 0:
        raise ConfigError("refinement levels must be non-negative")
    if cfg.sigma0 <= 0 or cfg.zeta0 <= 0:
        raise ConfigError("background conductivity and contact peaks must be positive")
    inc = cfg.inclusion
    if inc is not None:
        if len(inc.center) != 2 or inc.radius <= 0 or inc.conductivity <= 0:
            raise ConfigError("inclusion needs a 2D center, a positive radius and conductivity")
        if math.hypot(*inc.center) + inc.radius >= t.radius:
            raise ConfigError("inclusion does not fit inside the tank")
        if inc.height is not None and not 0 < inc.height:
            raise ConfigError("inclusion height must be positive")
    c = cfg.contact
    if c is not None:
        bad = [m for m in c.electrodes if not 0 <= int(m) < t.electrodes]
        if bad:
            raise ConfigError(f"perturbed electrodes {bad} do not exist (M = {t.electrodes})")
        mult = np.atleast_1d(np.asarray(c.multiplier, dtype=float))
        if mult.size not in (1, len(c.electrodes)) or np.any(mult <= 0):
            raise ConfigError("contact multipliers must be positive, one or one per electrode")
    if cfg.patterns not in PATTERN_KINDS or cfg.patterns == "custom":
        raise ConfigError(f"unknown pattern kind {cfg.patterns!r}")
    unknown = [p for p in cfg.projections if p not in PROJECTION_KINDS]
    if unknown:
        raise ConfigError(f"unknown projection kinds {unknown}; expected {sorted(PROJECTION_KINDS)}")
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; expected one of {ALGORITHMS}")
    if cfg.noise_fraction < 0 or cfg.gamma <= 0 or cfg.T <= 0 or cfg.n_iter < 1 or cfg.n_draws < 1:
        raise ConfigError("noise fraction, gamma, T, n_iter and n_draws are out of range")


_NESTED = {"tank": TankConfig, "inclusion": InclusionConfig, "contact": ContactPerturbation, "draws": RandomDrawConfig, "thresholds": Thresholds}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kwargs = {}
    for k, v in data.items():
        if k in _NESTED and cls is ExperimentConfig:
            kwargs[k] = None if v is None else _build(_NESTED[k], v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "config")


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment description."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config_to_dict(cfg), sort_keys=True).encode()).hexdigest()


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {"eitproj": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "config": config_to_dict(cfg),
    }


def write_provenance(out_dir, cfg: ExperimentConfig, name: str = "provenance.json") -> Path:
    path = Path(out_dir) / name
    path.write_text(json.dumps(provenance(cfg), indent=2))
    return path


# ----------------------------------------------------------------------------
# Phantoms and simulation
# ----------------------------------------------------------------------------


@lru_cache(maxsize=4)
def tank_mesh(tank: TankConfig, level: int):
    return generate_cylinder_tank(tank.radius, tank.height, tank.spec(), refinement_level=level, max_nodes=tank.max_nodes)


def inclusion_mask(mesh, inclusion: InclusionConfig) -> np.ndarray:
    x, y = inclusion.center
    inside = np.hypot(mesh.nodes[:, 0] - x, mesh.nodes[:, 1] - y) < inclusion.radius
    if inclusion.height is not None:
        inside &= mesh.nodes[:, 2] <= inclusion.height
    return inside


def phantom_sigma(mesh, cfg: ExperimentConfig) -> np.ndarray:
    sigma = np.full(mesh.n_nodes, cfg.sigma0)
    if cfg.inclusion is not None:
        sigma[inclusion_mask(mesh, cfg.inclusion)] = cfg.inclusion.conductivity
    return sigma


def contact_states(layout, cfg: ExperimentConfig) -> tuple[ContactState, ContactState]:
    """Nominal and perturbed contact states."""
    base = ContactState.uniform(cfg.zeta0, layout, cfg.tau)
    if cfg.contact is None:
        return base, base
    peaks = base.peaks.copy()
    idx = np.asarray(cfg.contact.electrodes, dtype=int)
    peaks[idx] *= np.asarray(cfg.contact.multiplier, dtype=float)
    return base, base.with_peaks(peaks)


def patterns_for(cfg: ExperimentConfig):
    return make_patterns(cfg.patterns, cfg.tank.electrodes, cfg.amplitude)


def simulate_clean(cfg: ExperimentConfig, level: int | None = None) -> dict:
    """Noise-free ``U(s0,z0)``, ``U(s,z0)``, ``U(s0,z)`` and ``U(s,z)`` on the data mesh."""
    mesh, layout = tank_mesh(cfg.tank, cfg.tank.data_level if level is None else level)
    pats = patterns_for(cfg)
    z0, z = contact_states(layout, cfg)
    s0, s = np.full(mesh.n_nodes, cfg.sigma0), phantom_sigma(mesh, cfg)
    cache = {}

    def run(sig, con, key):
        if key not in cache:
            cache[key] = measure(solve(assemble(mesh, layout, sig, con), pats))
        return cache[key]

    has_s, has_z = cfg.inclusion is not None, cfg.contact is not None
    return {
        "u00": run(s0, z0, (0, 0)),
        "u_s0": run(s, z0, (int(has_s), 0)),
        "u_0z": run(s0, z, (0, int(has_z))),
        "u_sz": run(s, z, (int(has_s), int(has_z))),
    }


def noise_model(cfg: ExperimentConfig, clean: dict):
    """Noise scaled to the range of the reference measurement."""
    return make_noise(clean["u00"], cfg.noise_fraction)


def simulate(cfg: ExperimentConfig, out_dir=None) -> dict:
    """The four measurement vectors, with independent noise per vector when ``noise_fraction > 0``."""
    data = simulate_clean(cfg)
    if cfg.noise_fraction > 0:
        noise = noise_model(cfg, data)
        data = {k: v + noise.sample(np.random.default_rng([cfg.seed, i])) for i, (k, v) in enumerate(data.items())}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, name in MEASUREMENT_FILES.items():
            write_measurements(out / name, data[k], cfg.tank.electrodes)
        write_provenance(out, cfg, "simulate.json")
    return data


def read_simulation(in_dir) -> dict:
    in_dir = Path(in_dir)
    missing = [n for n in MEASUREMENT_FILES.values() if not (in_dir / n).exists()]
    if missing:
        raise ConfigError(f"missing measurement files in {in_dir}: {missing}")
    return {k: read_measurements(in_dir / n).ravel() for k, n in MEASUREMENT_FILES.items()}


# ----------------------------------------------------------------------------
# Linearization point
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Linearization:
    """Forward solution, Jacobians and projections at ``(sigma0, zeta0)`` on the inversion mesh."""

    mesh: object
    layout: object
    forward: object
    reference: np.ndarray
    blocks: dict
    projections: dict


def linearize(cfg: ExperimentConfig, sigma0=None, zeta0=None, kinds=("sigma", "zeta", "phi")) -> Linearization:
    mesh, layout = tank_mesh(cfg.tank, cfg.tank.inverse_level)
    sigma0 = cfg.sigma0 if sigma0 is None else sigma0
    zeta0 = cfg.zeta0 if zeta0 is None else zeta0
    contact = ContactState.uniform(zeta0, layout, cfg.tau)
    fw = solve(assemble(mesh, layout, sigma0, contact), patterns_for(cfg))
    needed = set(kinds)
    for p in cfg.projections:
        needed.update(PROJECTION_KINDS[p])
    blocks = {}
    if "sigma" in needed:
        blocks["sigma"] = jacobian_sigma(fw)
    if "zeta" in needed:
        blocks["zeta"] = jacobian_zeta(fw)
    for k in ("theta", "phi"):
        if k in needed:
            blocks[k] = jacobian_position(fw, which=k)
    projections = {p: (build_projection([blocks[k] for k in PROJECTION_KINDS[p]]) if p != "none" else None) for p in cfg.projections}
    return Linearization(mesh, layout, fw, measure(fw), blocks, projections)


# ----------------------------------------------------------------------------
# Studies
# ----------------------------------------------------------------------------


def angles_study(cfg: ExperimentConfig, n_draws: int | None = None, out_dir=None) -> dict:
    """Principal-angle stability of the contact projection under random draws.

    Each draw perturbs the contacts by the contact law and the conductivity by
    the log-normal law on ``cfg.draws.region``.  Returns per-draw ``theta_max``
    (degrees) and ``err_F`` plus summary rows.  A failed draw stops the study;
    the report then holds the completed draws and ``error`` is set.
    """
    n = cfg.n_draws if n_draws is None else int(n_draws)
    if n < 1:
        raise ConfigError("need at least one draw")
    mesh, layout = tank_mesh(cfg.tank, cfg.tank.inverse_level)
    pats = patterns_for(cfg)
    sigma_ref, zeta_ref = cfg.study_sigma0, cfg.study_zeta0
    fw0 = solve(assemble(mesh, layout, sigma_ref, ContactState.uniform(zeta_ref, layout, cfg.tau)), pats)
    j0 = jacobian_zeta(fw0)
    p0 = build_projection([j0])
    theta, err, error = [], [], None
    for child in np.random.SeedSequence(cfg.seed).spawn(n):
        rng = np.random.default_rng(child)
        try:
            peaks = draw_contacts(cfg.draws, layout.M, rng)
            sigma = draw_lognormal_field(cfg.draws, mesh, rng=rng, background=sigma_ref)
            fw = solve(assemble(mesh, layout, sigma, ContactState.uniform(zeta_ref, layout, cfg.tau).with_peaks(peaks)), pats)
            j = jacobian_zeta(fw)
            theta.append(theta_max(p0, build_projection([j])))
            err.append(frobenius_discrepancy(j, j0))
        except EITError as exc:
            error = f"draw {len(theta) + 1}: {exc}"
            break
    summary = None
    if out_dir is not None and theta:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = write_angles_report(out / "angles.csv", theta, err, seed=cfg.seed)
        write_provenance(out, cfg, "angles.json")
    elif theta:
        t, e = np.asarray(theta), np.asarray(err)
        summary = {k: (float(f(t)), float(f(e))) for k, f in (("max", np.max), ("mean", np.mean), ("std", np.std))}
    return {"theta_max": np.asarray(theta), "err_F": np.asarray(err), "summary": summary, "error": error}


def signal_study(cfg: ExperimentConfig, data: dict | None = None, lin: Linearization | None = None, out_dir=None):
    """Norms of the sigma-, zeta- and combined signals with and without projections.

    ``data`` defaults to noise-free simulated measurements.
    """
    data = simulate_clean(cfg) if data is None else data
    lin = linearize(cfg, kinds=()) if lin is None else lin
    ops = {name: p for name, p in lin.projections.items() if p is not None}
    bundle = signal_bundle(data["u00"], data["u_s0"], data["u_0z"], data["u_sz"], {ops[k].name: ops[k] for k in ops})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_norms_table(out / "signal_norms.csv", bundle)
        columns = {"s_sigma": bundle.s_sigma, "s_zeta": bundle.s_zeta, "s_combined": bundle.s_combined}
        for name, sig in bundle.projected.items():
            columns.update({f"{name}:{k}": v for k, v in sig.items()})
        with open(out / "signals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", *columns])
            for i in range(bundle.s_sigma.size):
                w.writerow([i, *(repr(float(v[i])) for v in columns.values())])
        write_provenance(out, cfg, "signals.json")
    return bundle


def top_fraction_centroid(mesh, w: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    """Volume-weighted horizontal centroid of the largest ``|w|`` nodes holding ``fraction`` of the volume."""
    vol = mesh.nodal_volumes
    order = np.argsort(-np.abs(w), kind="stable")
    cum = np.cumsum(vol[order])
    sel = order[: np.searchsorted(cum, fraction * vol.sum()) + 1]
    return (vol[sel, None] * mesh.nodes[sel, :2]).sum(axis=0) / vol[sel].sum()


def background_energy(mesh, w: np.ndarray, center, radius: float) -> float:
    """Volume-weighted ``sum |w|^2`` over nodes farther than ``radius`` from the vertical axis at ``center``."""
    far = np.hypot(mesh.nodes[:, 0] - center[0], mesh.nodes[:, 1] - center[1]) > radius
    return float(mesh.nodal_volumes[far] @ (w[far] ** 2))


def localization(mesh, w: np.ndarray, cfg: ExperimentConfig) -> dict:
    inc = cfg.inclusion
    if inc is None:
        raise ConfigError("localization needs an inclusion")
    th = cfg.thresholds
    c = top_fraction_centroid(mesh, w, th.top_fraction)
    dist = float(np.hypot(c[0] - inc.center[0], c[1] - inc.center[1]))
    return {
        "centroid": c.tolist(),
        "distance": dist,
        "localized": dist <= th.localization_radii * inc.radius,
        "background": background_energy(mesh, w, inc.center, th.background_radii * inc.radius),
    }


def reconstruct(cfg: ExperimentConfig, data: dict | None = None, lin: Linearization | None = None, out_dir=None) -> dict:
    """Difference reconstructions of ``U(sigma, zeta) - U(sigma0, zeta0)`` for each configured projection.

    ``data`` defaults to :func:`simulate` (noisy when ``noise_fraction > 0``).
    The model reference ``U(sigma0, zeta0)`` is computed on the inversion mesh.
    Noise-free data are still weighted with a nominal 0.5% noise level.
    """
    if data is None:
        data = simulate(cfg)
    lin = linearize(cfg, kinds=("sigma",)) if lin is None else lin
    y = np.asarray(data["u_sz"], dtype=float) - lin.reference
    frac = cfg.noise_fraction if cfg.noise_fraction > 0 else 0.005
    noise = make_noise(data["u00"], frac)
    reg = make_regularizer(lin.mesh, cfg.T, cfg.gamma)
    results = {}
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    for name, proj in lin.projections.items():
        problem = build_problem(lin.blocks["sigma"], y, noise, reg, proj)
        meta = {"projection_kind": name, "seed": cfg.seed, "config_hash": config_hash(cfg)}
        if cfg.algorithm == "one_step":
            res = one_step(problem, **meta)
        else:
            res = lagged_diffusivity(problem, cfg.n_iter, **meta)
        results[name] = res
        if out is not None:
            write_reconstruction(out / f"recon_{name}.csv", res)
            for z in cfg.slice_heights:
                write_slice(out / f"slice_{name}_z{z:g}.csv", slice_samples(lin.mesh, res.w, z, cfg.slice_spacing))
    if out is not None:
        write_provenance(out, cfg, "reconstruct.json")
    return results
