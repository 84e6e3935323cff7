"""Linearized reconstruction with smoothness and total-variation priors.

The data model is ``y = J w + e`` with ``e ~ N(0, s^2 I)``.  With the
whitening ``B = C P`` (``C = I / s``, ``P`` an optional nuisance projection)
we set ``A = B J`` and ``b = B y`` and minimize

    F(w) = 1/2 ||b - A w||^2 + gamma Psi(w).

The one-step estimate replaces ``Psi`` by its quadratic approximation at
zero and is computed by the Woodbury form

    w = Theta^{-1} A^T (gamma I + A Theta^{-1} A^T)^{-1} b,

which only needs a factorization of the sparse ``Theta`` and a dense solve of
the size of the data.  Lagged diffusivity repeats this with ``Theta(w_j)``;
since ``sqrt`` is concave, each step minimizes a majorizer of ``F`` and the
objective cannot increase.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .errors import ContractError, EITError, NumericError, ResourceError
from .projection import ProjectionOperator
from .regularization import RegularizerState, psi_value, theta_matrix
from .sampling import NoiseModel
from .sensitivity import JacobianBlock

DENSE_ORACLE_LIMIT = 6000


@dataclass(frozen=True, eq=False)
class LinearizedProblem:
    J: np.ndarray
    y: np.ndarray
    noise: NoiseModel
    regularizer: RegularizerState
    projection: ProjectionOperator | None = None
    A: np.ndarray = field(init=False, repr=False)
    b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        J = self.J.matrix if isinstance(self.J, JacobianBlock) else np.asarray(self.J, dtype=float)
        y = np.asarray(self.y, dtype=float).ravel()
        if J.shape[0] != y.size:
            raise ContractError(f"Jacobian has {J.shape[0]} rows, data has {y.size} entries")
        if self.noise.size != y.size:
            raise ContractError(f"noise model of size {self.noise.size} for {y.size} data")
        if J.shape[1] != self.regularizer.mesh.n_nodes:
            raise ContractError("Jacobian columns do not match the regularizer mesh")
        if self.projection is not None and self.projection.dim != y.size:
            raise ContractError("projection dimension does not match the data")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "A", self.whiten(J))
        object.__setattr__(self, "b", self.whiten(y))

    def whiten(self, v: np.ndarray) -> np.ndarray:
        """Apply ``B = C P``."""
        if self.projection is not None:
            v = self.projection.apply(v)
        return self.noise.whiten(v)

    @property
    def projection_kind(self) -> str:
        return "none" if self.projection is None else ",".join(self.projection.kinds) or "custom"


def build_problem(J, y, noise: NoiseModel, regularizer: RegularizerState, projection=None) -> LinearizedProblem:
    return LinearizedProblem(J, y, noise, regularizer, projection)


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    w: np.ndarray
    history: list
    objectives: list
    metadata: dict
    error: str | None = None


def objective(problem: LinearizedProblem, w: np.ndarray) -> float:
    r = problem.b - problem.A @ w
    return float(0.5 * (r @ r) + problem.regularizer.gamma * psi_value(w, problem.regularizer))


def _factorize(theta):
    try:
        lu = spla.splu(theta.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise NumericError(f"factorization of Theta failed: {exc}") from exc
    return lu


def _woodbury(problem: LinearizedProblem, theta) -> np.ndarray:
    A, b, gamma = problem.A, problem.b, problem.regularizer.gamma
    lu = _factorize(theta)
    x = lu.solve(np.ascontiguousarray(A.T))  # Theta^{-1} A^T
    g = A @ x
    g = 0.5 * (g + g.T)
    g[np.diag_indices_from(g)] += gamma
    try:
        z = sla.solve(g, b, assume_a="pos")
    except sla.LinAlgError as exc:
        raise NumericError(f"dense Woodbury system is not positive definite: {exc}") from exc
    w = x @ z
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite reconstruction")
    return w


def _metadata(problem: LinearizedProblem, algorithm: str, **extra) -> dict:
    reg = problem.regularizer
    mesh_hash = hashlib.sha256(reg.mesh.nodes.tobytes() + reg.mesh.tets.tobytes()).hexdigest()[:16]
    meta = {
        "algorithm": algorithm,
        "gamma": reg.gamma,
        "T": reg.T,
        "epsilon": reg.epsilon,
        "projection": problem.projection_kind,
        "noise_std": problem.noise.std,
        "mesh_hash": mesh_hash,
    }
    meta.update(extra)
    return meta


def one_step(problem: LinearizedProblem, **meta) -> ReconstructionResult:
    """Minimizer of ``1/2 ||b - A w||^2 + gamma/2 w^T Theta(0) w`` via the Woodbury form."""
    w0 = np.zeros(problem.A.shape[1])
    w = _woodbury(problem, theta_matrix(w0, problem.regularizer))
    return ReconstructionResult(w, [w0, w], [objective(problem, w0), objective(problem, w)], _metadata(problem, "one_step", **meta))


def normal_equations(problem: LinearizedProblem, w_lag: np.ndarray | None = None) -> np.ndarray:
    """Direct dense solve of ``(A^T A + gamma Theta) w = A^T b`` (verification path)."""
    n = problem.A.shape[1]
    if n > DENSE_ORACLE_LIMIT:
        raise ResourceError(f"dense normal equations for {n} unknowns exceed the limit {DENSE_ORACLE_LIMIT}")
    theta = theta_matrix(np.zeros(n) if w_lag is None else w_lag, problem.regularizer).toarray()
    lhs = problem.A.T @ problem.A + problem.regularizer.gamma * theta
    return sla.solve(lhs, problem.A.T @ problem.b, assume_a="pos")


def lagged_diffusivity(problem: LinearizedProblem, n_iter: int = 10, w0: np.ndarray | None = None, **meta) -> ReconstructionResult:
    """Lagged-diffusivity iteration started from ``w0`` (default zero).

    On a numerical failure the partial history is returned with ``error`` set.
    """
    w = np.zeros(problem.A.shape[1]) if w0 is None else np.asarray(w0, dtype=float).copy()
    history, objectives = [w], [objective(problem, w)]
    error = None
    for _ in range(n_iter):
        try:
            w = _woodbury(problem, theta_matrix(w, problem.regularizer))
        except EITError as exc:
            error = str(exc)
            break
        history.append(w)
        objectives.append(objective(problem, w))
    md = _metadata(problem, "lagged_diffusivity", n_iter=n_iter, **meta)
    return ReconstructionResult(w, history, objectives, md, error)


# ----------------------------------------------------------------------------
# Output
# ----------------------------------------------------------------------------


def write_reconstruction(path, result: ReconstructionResult) -> Path:
    """``node,value`` CSV plus a ``.json`` sidecar with metadata and objective history."""
    path = Path(path).with_suffix(".csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "value"])
        for k, v in enumerate(result.w):
            wr.writerow([k, repr(float(v))])
    side = path.with_suffix(".json")
    side.write_text(json.dumps({**result.metadata, "objectives": result.objectives, "error": result.error}, indent=2))
    return side


def slice_samples(mesh, values: np.ndarray, z: float, spacing: float = 0.002) -> np.ndarray:
    """``(x, y, value)`` rows on a square grid in the horizontal plane at height ``z``.

    Grid points outside the mesh are dropped.
    """
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    if not lo[2] <= z <= hi[2]:
        raise ContractError(f"slice height {z} outside the mesh range [{lo[2]}, {hi[2]}]")
    xs = np.arange(lo[0], hi[0] + spacing / 2, spacing)
    ys = np.arange(lo[1], hi[1] + spacing / 2, spacing)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])
    vals = mesh.interpolate(np.asarray(values, dtype=float), pts)
    keep = np.isfinite(vals)
    return np.column_stack([pts[keep, 0], pts[keep, 1], vals[keep]])


def write_slice(path, samples: np.ndarray) -> None:
    np.savetxt(path, samples, delimiter=",", header="x,y,value", comments="", fmt="%.10g")
