"""Smoothened complete electrode model: assembly, solution and measurements.

The weak form on ``H^1(Omega) + R^M_0`` reads

    B((u, U), (v, V)) = int sigma grad u . grad v dx
                        + sum_m int_{E_m} zeta (U_m - u)(V_m - v) dS = I . V,

with ``zeta = zeta_m * zhat(r)`` on electrode ``m`` and

    zhat(r) = exp(tau - tau R^2 / (R^2 - r^2)),   r < R,

continued by zero.  ``u`` is discretized with P1 hat functions and the
electrode potentials with an orthonormal basis ``Q`` of the mean-free
subspace, so that every solved ``U = Q beta`` is mean-free by construction.
All blocks of the Galerkin matrix are linear in ``sigma_j`` and ``zeta_m``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, ContractError, DomainError, NumericError
from .mesh import ElectrodeLayout, Mesh

DEFAULT_TAU = 0.4
DEFAULT_AMPLITUDE = 1e-3
#: Above this many unknowns the solver switches from sparse LU to preconditioned CG.
DIRECT_LIMIT = 400_000
CG_RTOL = 1e-12


# ----------------------------------------------------------------------------
# Contact conductivity
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ContactState:
    """Peak contact conductivities (S/m^2) and the shared shape parameters."""

    peaks: np.ndarray
    radius: float
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        peaks = np.atleast_1d(np.asarray(self.peaks, dtype=float)).copy()
        peaks.setflags(write=False)
        object.__setattr__(self, "peaks", peaks)
        if not np.all(np.isfinite(peaks)) or np.any(peaks <= 0):
            raise ConfigError(f"contact peaks must be positive and finite, got min {peaks.min()}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.radius <= 0:
            raise ConfigError(f"electrode radius must be positive, got {self.radius}")

    @property
    def M(self) -> int:
        return self.peaks.size

    @classmethod
    def uniform(cls, value: float, layout: ElectrodeLayout, tau: float = DEFAULT_TAU) -> "ContactState":
        return cls(np.full(layout.M, float(value)), float(layout.radii[0]), tau)

    def with_peaks(self, peaks) -> "ContactState":
        return ContactState(peaks, self.radius, self.tau)

    def scaled(self, c: float) -> "ContactState":
        return self.with_peaks(c * self.peaks)


def _shape(r: np.ndarray, R: float, tau: float) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < R
    ri = r[inside]
    out[inside] = np.exp(tau - tau * R * R / (R * R - ri * ri))
    return out


def _shape_derivative(r: np.ndarray, R: float, tau: float) -> np.ndarray:
    """d zhat / dr, zero outside the disk."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < R
    ri = r[inside]
    d = R * R - ri * ri
    out[inside] = np.exp(tau - tau * R * R / d) * (-2.0 * tau * R * R * ri / (d * d))
    return out


def contact_profile(contact: ContactState, m: int, r) -> np.ndarray | float:
    """``zeta_m * zhat(r)``; zero for ``r >= R``."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise DomainError("polar radius must be non-negative")
    val = contact.peaks[m] * _shape(r_arr, contact.radius, contact.tau)
    return float(val) if np.ndim(r) == 0 else val


def contact_profile_derivative(contact: ContactState, m: int, r) -> np.ndarray:
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise DomainError("polar radius must be non-negative")
    return contact.peaks[m] * _shape_derivative(r_arr, contact.radius, contact.tau)


# ----------------------------------------------------------------------------
# Current patterns
# ----------------------------------------------------------------------------

PATTERN_KINDS = ("adjacent", "opposite", "fourier", "custom")


@dataclass(frozen=True)
class CurrentPatternSet:
    """``N`` net current patterns (amperes), one per row of ``currents``."""

    currents: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        cur = np.atleast_2d(np.asarray(self.currents, dtype=float)).copy()
        cur.setflags(write=False)
        object.__setattr__(self, "currents", cur)
        if self.kind not in PATTERN_KINDS:
            raise ConfigError(f"unknown pattern kind {self.kind!r}")
        if cur.shape[1] < 2:
            raise ConfigError("patterns need at least 2 electrodes")
        scale = np.abs(cur).max(axis=1)
        drift = np.abs(cur.sum(axis=1))
        if np.any(drift > 1e-12 * scale * cur.shape[1]):
            raise ConfigError(f"current pattern {int(np.argmax(drift))} is not mean-free")

    @property
    def N(self) -> int:
        return self.currents.shape[0]

    @property
    def M(self) -> int:
        return self.currents.shape[1]

    def spans_mean_free(self) -> bool:
        return self.N >= self.M - 1 and np.linalg.matrix_rank(self.currents) == self.M - 1


def make_patterns(kind: str, M: int, amplitude: float = DEFAULT_AMPLITUDE) -> CurrentPatternSet:
    """Adjacent, opposite or Fourier current patterns.

    Electrode indices are zero-based here: adjacent pattern ``m`` drives
    ``+amplitude`` into electrode ``2m`` and out of ``2m + 2``; opposite
    pattern ``m`` uses electrodes ``2m`` and ``2m + M/2``.
    """
    if M < 2 or M % 2:
        raise ConfigError(f"{kind} patterns need an even number of electrodes, got {M}")
    if kind == "adjacent":
        if M < 4:
            raise ConfigError("adjacent patterns need at least 4 electrodes")
        cur = np.zeros((M // 2, M))
        for m in range(M // 2):
            cur[m, 2 * m] += 1.0
            cur[m, (2 * m + 2) % M] -= 1.0
    elif kind == "opposite":
        if M % 4:
            raise ConfigError(f"opposite patterns need M divisible by 4, got {M}")
        cur = np.zeros((M // 4, M))
        for m in range(M // 4):
            cur[m, 2 * m] = 1.0
            cur[m, 2 * m + M // 2] = -1.0
    elif kind == "fourier":
        j = np.arange(M)
        cos = [np.cos(2 * np.pi * j * k / M) for k in range(1, M // 2 + 1)]
        sin = [np.sin(2 * np.pi * j * k / M) for k in range(1, M // 2)]
        cur = np.array(cos + sin)
        cur -= cur.mean(axis=1, keepdims=True)
    else:
        raise ConfigError(f"unknown pattern kind {kind!r}")
    return CurrentPatternSet(amplitude * cur, kind)


def concat_patterns(*sets: CurrentPatternSet) -> CurrentPatternSet:
    kinds = {s.kind for s in sets}
    kind = kinds.pop() if len(kinds) == 1 else "custom"
    return CurrentPatternSet(np.vstack([s.currents for s in sets]), kind)


def mean_free_basis(M: int) -> np.ndarray:
    """Orthonormalized ``e_k - e_M``, ``k = 1..M-1``, as an ``(M, M-1)`` matrix."""
    b = np.zeros((M, M - 1))
    b[np.arange(M - 1), np.arange(M - 1)] = 1.0
    b[M - 1, :] = -1.0
    q, _ = np.linalg.qr(b)
    return q


# ----------------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ElectrodeContact:
    """Contact data of one electrode at its quadrature points (face-major)."""

    nodes: np.ndarray  # (nf, 3) mesh node indices
    bary: np.ndarray  # (q, 3)
    weights: np.ndarray  # (nf, q)
    shape: np.ndarray  # zhat at the points, (nf, q)
    dshape: np.ndarray  # zhat'(r), (nf, q)
    grad_r: np.ndarray  # unit vector of increasing r, (nf, q, 3)

    def trace(self, u: np.ndarray) -> np.ndarray:
        """Values of nodal fields ``u`` (..., n) at the quadrature points, (..., nf, q)."""
        return np.einsum("...fa,qa->...fq", u[..., self.nodes], self.bary)


def _electrode_contacts(layout: ElectrodeLayout, contact: ContactState) -> list[ElectrodeContact]:
    out = []
    for e in layout.electrodes:
        q = e.quad
        pts = q.points.reshape(-1, 3)
        d = pts - e.center
        perp = d - np.outer(d @ e.axis, e.axis)
        r = np.linalg.norm(perp, axis=1)
        safe = np.where(r > 0, r, 1.0)
        grad_r = (perp / safe[:, None]).reshape(q.points.shape)
        shape = _shape(r, contact.radius, contact.tau).reshape(q.weights.shape)
        dshape = _shape_derivative(r, contact.radius, contact.tau).reshape(q.weights.shape)
        out.append(ElectrodeContact(q.nodes, q.bary, q.weights, shape, dshape, grad_r))
    return out


def _contact_blocks(n: int, contacts: list[ElectrodeContact], peaks: np.ndarray):
    """Profile-weighted boundary blocks: S (n x n), C (n x M), D (M,)."""
    rows, cols, vals = [], [], []
    M = len(contacts)
    cmat = np.zeros((n, M))
    dvec = np.zeros(M)
    for m, ec in enumerate(contacts):
        wz = peaks[m] * ec.shape * ec.weights
        loc = np.einsum("fq,qa,qb->fab", wz, ec.bary, ec.bary)
        rows.append(np.repeat(ec.nodes, 3, axis=1).ravel())
        cols.append(np.tile(ec.nodes, (1, 3)).ravel())
        vals.append(loc.ravel())
        np.add.at(cmat[:, m], ec.nodes.ravel(), -(wz @ ec.bary).ravel())
        dvec[m] = wz.sum()
    s = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return s, cmat, dvec


class _Solver:
    def __init__(self, matrix: sp.csc_matrix):
        self.matrix = matrix
        self.lu = None
        self.precond = None
        if matrix.shape[0] <= DIRECT_LIMIT:
            try:
                self.lu = spla.splu(
                    matrix,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except (RuntimeError, MemoryError) as exc:
                warnings.warn(f"sparse LU failed ({exc}); falling back to conjugate gradients", RuntimeWarning)
        if self.lu is None:
            d = matrix.diagonal()
            self.precond = sp.diags(1.0 / d)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.lu is not None:
            x = self.lu.solve(rhs)
        else:
            cols = rhs.reshape(rhs.shape[0], -1)
            x = np.empty_like(cols)
            for k in range(cols.shape[1]):
                x[:, k], info = spla.cg(self.matrix, cols[:, k], rtol=CG_RTOL, maxiter=20 * self.matrix.shape[0], M=self.precond)
                if info:
                    raise NumericError(f"conjugate gradients did not converge (info={info})")
            x = x.reshape(rhs.shape)
        res = self.matrix @ x - rhs
        rnorm = np.linalg.norm(res)
        bnorm = np.linalg.norm(rhs)
        if not np.all(np.isfinite(x)) or rnorm > 1e-8 * max(bnorm, np.finfo(float).tiny):
            raise NumericError(f"linear solve failed: relative residual {rnorm / max(bnorm, 1e-300):.3e}")
        return x


@dataclass(frozen=True, eq=False)
class SystemHandle:
    """Assembled Galerkin system with its cached factorization."""

    mesh: Mesh
    layout: ElectrodeLayout
    sigma: np.ndarray
    contact: ContactState
    matrix: sp.csc_matrix
    basis: np.ndarray  # (M, M-1) orthonormal mean-free basis
    contacts: list = field(repr=False)
    _solver: _Solver = field(repr=False)

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    @property
    def M(self) -> int:
        return self.layout.M

    @property
    def key(self) -> tuple:
        """Identity of the linearization point (mesh, layout, sigma, contact)."""
        return (id(self.mesh), id(self.layout), self.sigma.tobytes(), self.contact.peaks.tobytes(), self.contact.tau)

    def solve_rhs(self, rhs: np.ndarray) -> np.ndarray:
        return self._solver.solve(rhs)


def assemble(mesh: Mesh, layout: ElectrodeLayout, sigma, contact: ContactState) -> SystemHandle:
    """Assemble and factorize the discrete smoothened CEM system."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = np.full(mesh.n_nodes, float(sigma))
    if sigma.shape != (mesh.n_nodes,):
        raise ContractError(f"conductivity has {sigma.size} values for {mesh.n_nodes} nodes")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ConfigError("conductivity must be positive and finite at every node")
    if contact.M != layout.M:
        raise ContractError(f"contact state has {contact.M} peaks for {layout.M} electrodes")
    if np.any(np.abs(layout.radii - contact.radius) > 1e-12 * contact.radius):
        raise ContractError("contact radius differs from the electrode radii of the layout")
    sigma = sigma.copy()
    sigma.setflags(write=False)
    n, M = mesh.n_nodes, layout.M
    contacts = _electrode_contacts(layout, contact)
    s, cmat, dvec = _contact_blocks(n, contacts, contact.peaks)
    bad = np.flatnonzero(dvec <= 1e-14 * np.max(np.abs(dvec)))
    if bad.size:
        raise NumericError(f"electrode {int(bad[0])} has numerically zero total contact conductance")
    q = mean_free_basis(M)
    k = mesh.stiffness(sigma[mesh.tets].mean(axis=1))
    a12 = sp.csr_matrix(cmat @ q)
    a22 = sp.csr_matrix(q.T @ (dvec[:, None] * q))
    matrix = sp.bmat([[k + s, a12], [a12.T, a22]], format="csc")
    matrix.sum_duplicates()
    return SystemHandle(mesh, layout, sigma, contact, matrix, q, contacts, _Solver(matrix))


# ----------------------------------------------------------------------------
# Solution and measurements
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    """Per-pattern nodal potentials ``u`` (N, n) and electrode potentials ``U`` (N, M)."""

    system: SystemHandle
    patterns: CurrentPatternSet
    u: np.ndarray
    U: np.ndarray

    @property
    def N(self) -> int:
        return self.patterns.N


def solve(system: SystemHandle, patterns: CurrentPatternSet) -> ForwardSolution:
    if patterns.M != system.M:
        raise ContractError(f"patterns have {patterns.M} electrodes, system has {system.M}")
    n = system.n
    rhs = np.zeros((n + system.M - 1, patterns.N))
    rhs[n:] = system.basis.T @ patterns.currents.T
    x = system.solve_rhs(rhs)
    u = np.ascontiguousarray(x[:n].T)
    U = np.ascontiguousarray((system.basis @ x[n:]).T)
    return ForwardSolution(system, patterns, u, U)


def measure(solution: ForwardSolution) -> np.ndarray:
    """Stacked measurement vector, pattern-major: ``[U(I_1); ...; U(I_N)]``."""
    return solution.U.ravel().copy()


def forward_map(mesh, layout, sigma, contact, patterns) -> np.ndarray:
    return measure(solve(assemble(mesh, layout, sigma, contact), patterns))


# ----------------------------------------------------------------------------
# Measurement files
# ----------------------------------------------------------------------------


def write_measurements(path, data, M: int) -> None:
    """CSV with header ``pattern,electrode,voltage``, pattern-major rows, 1-based indices."""
    data = np.asarray(data, dtype=float).reshape(-1, M)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern", "electrode", "voltage"])
        for n, row in enumerate(data):
            for m, v in enumerate(row):
                w.writerow([n + 1, m + 1, repr(float(v))])


def read_measurements(path) -> np.ndarray:
    """Read a measurement CSV back into an ``(N, M)`` array."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        idx = np.array([[int(r["pattern"]), int(r["electrode"])] for r in rows])
        vals = np.array([float(r["voltage"]) for r in rows])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed measurement file ({exc})") from exc
    if not rows:
        raise ConfigError(f"{path}: no measurements")
    N, M = idx.max(axis=0)
    if len(rows) != N * M:
        raise ConfigError(f"{path}: expected {N * M} rows, found {len(rows)}")
    out = np.full((N, M), np.nan)
    out[idx[:, 0] - 1, idx[:, 1] - 1] = vals
    if np.isnan(out).any():
        raise ConfigError(f"{path}: missing (pattern, electrode) entries")
    return out
