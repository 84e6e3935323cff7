"""Smoothed total-variation prior.

    Psi(w) = int sqrt(|grad w|^2 + T^2) dx + (eps / 2) ||w||^2

For P1 fields ``|grad w|`` is constant on each tetrahedron, so ``Psi`` and
its gradient ``Theta(w) w`` are exact weighted stiffness sums with

    Theta(w) = sum_T |T| G_T G_T^T / sqrt(|grad w_T|^2 + T^2) + eps I.

At ``w = 0`` this is ``K / T + eps I`` with ``K`` the plain stiffness matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, ContractError

DEFAULT_T = 1e-6
GAMMA_ONE_STEP = 1e-2
GAMMA_LAGGED = 1e2


@dataclass(frozen=True, eq=False)
class RegularizerState:
    mesh: object = field(repr=False)
    T: float = DEFAULT_T
    epsilon: float = 0.0
    gamma: float = GAMMA_ONE_STEP

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError(f"T must be positive, got {self.T}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return self.mesh.stiffness()

    def with_gamma(self, gamma: float) -> "RegularizerState":
        return replace(self, gamma=gamma)


def make_regularizer(mesh, T: float = DEFAULT_T, gamma: float = GAMMA_ONE_STEP, epsilon: float | None = None) -> RegularizerState:
    """Regularizer with ``epsilon`` from :func:`epsilon_heuristic` unless given."""
    if epsilon is None:
        epsilon = epsilon_heuristic(mesh, T)
    return RegularizerState(mesh, T, float(epsilon), gamma)


def epsilon_heuristic(mesh, T: float = DEFAULT_T) -> float:
    """Second-smallest eigenvalue of ``K / T``.

    Falls back to ``1e-8 * max(diag(K / T))`` (with a warning) if the
    eigen-solver fails.
    """
    if not T > 0:
        raise ConfigError(f"T must be positive, got {T}")
    k = mesh.stiffness() / T
    diag = k.diagonal()
    try:
        shift = -1e-3 * diag.mean()
        # fixed start vector: ARPACK otherwise starts from a random one
        v0 = np.random.default_rng(0).standard_normal(k.shape[0])
        vals = spla.eigsh(k.tocsc(), k=2, sigma=shift, which="LM", v0=v0, return_eigenvectors=False)
        eps = float(np.sort(vals)[1])
        if not eps > 0:
            raise RuntimeError(f"non-positive second eigenvalue {eps}")
    except (RuntimeError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
        eps = 1e-8 * float(diag.max())
        warnings.warn(f"eigen-solver failed ({exc}); using epsilon = {eps:.3e}", RuntimeWarning)
    return eps


def gradient_norms(mesh, w: np.ndarray) -> np.ndarray:
    """``|grad w|`` on each tetrahedron."""
    w = np.asarray(w, dtype=float)
    if w.shape != (mesh.n_nodes,):
        raise ContractError(f"field has {w.size} values for {mesh.n_nodes} nodes")
    g = np.einsum("tac,ta->tc", mesh.gradients, w[mesh.tets])
    return np.linalg.norm(g, axis=1)


def theta_matrix(w: np.ndarray, state: RegularizerState) -> sp.csr_matrix:
    """``Theta(w)``, symmetric positive definite."""
    mesh = state.mesh
    g = gradient_norms(mesh, w)
    # scaled so that the weights are exactly 1 where the gradient vanishes and
    # Theta(0) reproduces K / T + eps I bit for bit
    weights = state.T / np.sqrt(g * g + state.T * state.T)
    return (mesh.stiffness(weights) / state.T + state.epsilon * sp.identity(mesh.n_nodes, format="csr")).tocsr()


def psi_value(w: np.ndarray, state: RegularizerState) -> float:
    mesh = state.mesh
    g = gradient_norms(mesh, w)
    w = np.asarray(w, dtype=float)
    return float(mesh.volumes @ np.sqrt(g * g + state.T**2) + 0.5 * state.epsilon * (w @ w))


def psi_gradient(w: np.ndarray, state: RegularizerState) -> np.ndarray:
    return theta_matrix(w, state) @ np.asarray(w, dtype=float)
