"""Jacobians of the measurement vector by the adjoint sampling formulas.

For a parameter direction the derivative ``DU`` of the electrode potentials
is sampled against auxiliary solutions ``(u~, U~)`` for currents ``I~``:

    I~ . D_sigma U(eta) = - int eta grad u . grad u~ dx
    I~ . D_zeta  U(w)   = - int_{dOmega} w (U - u)(U~ - u~) dS
    I~ . D_a     U      =   int_{dOmega} (h . Grad zeta)(U - u)(U~ - u~) dS

The first two are exact for the discrete system, which is linear in the
coefficients.  ``DU`` is mean-free, so ``M - 1`` independent samples recover
it: with the auxiliary currents as columns of ``A`` and ``Q`` the mean-free
basis, ``DU = Q (A^T Q)^{-1} s``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError
from .forward import CurrentPatternSet, ForwardSolution, SystemHandle, solve

KINDS = ("sigma", "zeta", "theta", "phi")


@dataclass(frozen=True, eq=False)
class JacobianBlock:
    """Jacobian block: ``(M N, p)`` matrix with rows ordered pattern-major."""

    matrix: np.ndarray
    kind: str
    point: str  # hash of the linearization point
    M: int
    N: int

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def normalized(self) -> np.ndarray:
        norms = np.linalg.norm(self.matrix, axis=0)
        norms[norms == 0] = 1.0
        return self.matrix / norms


def linearization_hash(system: SystemHandle) -> str:
    h = hashlib.sha256()
    h.update(system.sigma.tobytes())
    h.update(system.contact.peaks.tobytes())
    h.update(np.float64(system.contact.tau).tobytes())
    for e in system.layout.electrodes:
        h.update(e.center.tobytes())
    h.update(np.asarray(system.mesh.nodes.shape).tobytes())
    return h.hexdigest()[:16]


def canonical_aux(M: int) -> CurrentPatternSet:
    """Auxiliary currents ``e_k - e_M``, k = 1..M-1."""
    a = np.zeros((M - 1, M))
    a[np.arange(M - 1), np.arange(M - 1)] = 1.0
    a[:, M - 1] = -1.0
    return CurrentPatternSet(a, "custom")


def auxiliary_solution(forward: ForwardSolution, aux=None) -> ForwardSolution:
    """Solve for the auxiliary patterns, reusing the factorization of ``forward``.

    ``aux`` may be a pattern set, an already solved auxiliary solution, or
    ``None`` (reuse the measurement patterns if they span the mean-free
    subspace, else the canonical ``e_k - e_M`` basis).
    """
    system = forward.system
    if isinstance(aux, ForwardSolution):
        if aux.system is not system and aux.system.key != system.key:
            raise ContractError("auxiliary solution was computed at a different linearization point")
        sol = aux
    else:
        if aux is None:
            aux = forward.patterns if forward.patterns.spans_mean_free() else canonical_aux(system.M)
        if aux is forward.patterns:
            sol = forward
        else:
            sol = solve(system, aux)
    if not sol.patterns.spans_mean_free():
        raise ContractError("auxiliary patterns must span the mean-free subspace")
    return sol


def _expansion(system: SystemHandle, aux: ForwardSolution) -> np.ndarray:
    """Matrix ``E`` (M, K) mapping auxiliary samples to the derivative: ``DU = E s``."""
    q = system.basis
    g = aux.patterns.currents @ q  # (K, M-1)
    return q @ np.linalg.pinv(g)


def _assemble(samples: np.ndarray, expansion: np.ndarray) -> np.ndarray:
    """samples (N, K, p) -> matrix (N*M, p)."""
    du = np.einsum("mk,nkp->nmp", expansion, samples)
    return du.reshape(-1, samples.shape[2])


def _incidence(mesh) -> sp.csr_matrix:
    """Sparse (n_nodes, n_tets) map spreading ``|T|/4`` of a tet value to its nodes."""
    rows = mesh.tets.ravel()
    cols = np.repeat(np.arange(mesh.n_tets), 4)
    vals = np.repeat(mesh.volumes / 4.0, 4)
    return sp.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_tets))


def jacobian_sigma(forward: ForwardSolution, aux_basis=None) -> JacobianBlock:
    """Derivative with respect to the nodal conductivities ``sigma_j``."""
    aux = auxiliary_solution(forward, aux_basis)
    system = forward.system
    mesh = system.mesh
    grads = mesh.gradients
    inc = _incidence(mesh)
    gu = np.einsum("tac,nta->ntc", grads, forward.u[:, mesh.tets])
    ga = np.einsum("tac,kta->ktc", grads, aux.u[:, mesh.tets])
    ex = _expansion(system, aux)
    M, N = system.M, forward.N
    out = np.empty((N * M, mesh.n_nodes))
    for n in range(N):
        dots = np.einsum("tc,ktc->kt", gu[n], ga)
        s = -(inc @ dots.T).T  # (K, n_nodes)
        out[n * M : (n + 1) * M] = ex @ s
    return JacobianBlock(out, "sigma", linearization_hash(system), M, N)


def _boundary_products(forward: ForwardSolution, aux: ForwardSolution, m: int):
    """(U_m - u)(U~_m - u~) at the quadrature points of electrode m, (N, K, nf, q)."""
    ec = forward.system.contacts[m]
    du = forward.U[:, m, None, None] - ec.trace(forward.u)
    da = aux.U[:, m, None, None] - ec.trace(aux.u)
    return ec, du, da


def jacobian_zeta(forward: ForwardSolution, aux_basis=None) -> JacobianBlock:
    """Derivative with respect to the peak contact conductivities ``zeta_m``."""
    aux = auxiliary_solution(forward, aux_basis)
    system = forward.system
    M, N, K = system.M, forward.N, aux.N
    s = np.empty((N, K, M))
    for m in range(M):
        ec, du, da = _boundary_products(forward, aux, m)
        wz = ec.shape * ec.weights
        s[:, :, m] = -np.einsum("fq,nfq,kfq->nk", wz, du, da)
    return JacobianBlock(_assemble(s, _expansion(system, aux)), "zeta", linearization_hash(system), M, N)


def jacobian_position(forward: ForwardSolution, aux_basis=None, which: str = "phi") -> JacobianBlock:
    """Derivative with respect to the polar (``theta``) or azimuthal (``phi``) electrode angles."""
    if which not in ("theta", "phi"):
        raise ConfigError(f"which must be 'theta' or 'phi', got {which!r}")
    aux = auxiliary_solution(forward, aux_basis)
    system = forward.system
    M, N, K = system.M, forward.N, aux.N
    s = np.empty((N, K, M))
    for m in range(M):
        quad = system.layout[m].quad
        h = quad.h_theta if which == "theta" else quad.h_phi
        if h is None:
            raise ContractError(f"electrode {m} has no {which} movement field")
        ec, du, da = _boundary_products(forward, aux, m)
        h_grad = system.contact.peaks[m] * ec.dshape * np.einsum("fqc,fqc->fq", h, ec.grad_r)
        s[:, :, m] = np.einsum("fq,nfq,kfq->nk", h_grad * ec.weights, du, da)
    return JacobianBlock(_assemble(s, _expansion(system, aux)), which, linearization_hash(system), M, N)


def jacobian(forward: ForwardSolution, kind: str, aux_basis=None) -> JacobianBlock:
    if kind == "sigma":
        return jacobian_sigma(forward, aux_basis)
    if kind == "zeta":
        return jacobian_zeta(forward, aux_basis)
    if kind in ("theta", "phi"):
        return jacobian_position(forward, aux_basis, kind)
    raise ConfigError(f"unknown Jacobian kind {kind!r}; expected one of {KINDS}")


def save_jacobian(path, block: JacobianBlock, fmt: str | None = None) -> Path:
    """Write the matrix (``.npy`` or ``.csv``) plus a ``.json`` sidecar descriptor."""
    path = Path(path)
    fmt = fmt or (path.suffix.lstrip(".") or "npy")
    if fmt == "npy":
        np.save(path.with_suffix(".npy"), block.matrix)
    elif fmt == "csv":
        np.savetxt(path.with_suffix(".csv"), block.matrix, delimiter=",", fmt="%.17g")
    else:
        raise ConfigError(f"unsupported Jacobian format {fmt!r}")
    meta = {"kind": block.kind, "point": block.point, "M": block.M, "N": block.N, "p": block.p, "format": fmt}
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2))
    return side


def load_jacobian(path) -> JacobianBlock:
    side = Path(path).with_suffix(".json")
    meta = json.loads(side.read_text())
    if meta["format"] == "npy":
        mat = np.load(side.with_suffix(".npy"))
    else:
        mat = np.loadtxt(side.with_suffix(".csv"), delimiter=",", ndmin=2)
    if mat.shape != (meta["M"] * meta["N"], meta["p"]):
        raise ConfigError(f"{side}: matrix shape {mat.shape} does not match its descriptor")
    return JacobianBlock(mat, meta["kind"], meta["point"], meta["M"], meta["N"])
