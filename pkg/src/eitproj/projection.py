"""Orthogonal projections that remove nuisance directions from the data.

Given Jacobian blocks ``J_1, ..., J_k`` (e.g. contact and electrode-position
Jacobians) we form an orthonormal basis ``Q`` of the range of ``[J_1 ... J_k]``
and project onto its orthogonal complement, ``P = I - Q Q^T``.  This is the
same operator as ``I - J (J^T J)^{-1} J^T`` but avoids squaring the condition
number.  Columns are normalized before the rank check because the blocks
carry different physical units; ``P`` itself does not depend on the scaling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import ContractError, DomainError, NumericError
from .sensitivity import JacobianBlock

MAX_CONDITION = 1e8


@dataclass(frozen=True, eq=False)
class ProjectionOperator:
    """``P = I - Q Q^T`` for an orthonormal ``Q`` (dim x d)."""

    basis: np.ndarray
    kinds: tuple = ()
    point: str = ""
    condition: float = 1.0

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def d(self) -> int:
        """Number of projected-out directions."""
        return self.basis.shape[1]

    @property
    def rank(self) -> int:
        return self.dim - self.d

    @property
    def name(self) -> str:
        return "P_" + ",".join(self.kinds) if self.kinds else "P"

    @cached_property
    def matrix(self) -> np.ndarray:
        q = self.basis
        return np.eye(self.dim) - q @ q.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``P v`` without forming ``P``; ``v`` may be a vector or a matrix of columns."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ContractError(f"vector of length {v.shape[0]} for a projector of dimension {self.dim}")
        return v - self.basis @ (self.basis.T @ v)

    def __matmul__(self, other):
        return self.apply(other)


def _as_matrix(block) -> np.ndarray:
    return block.matrix if isinstance(block, JacobianBlock) else np.asarray(block, dtype=float)


def build_projection(blocks) -> ProjectionOperator:
    """Projector onto the orthogonal complement of the combined range of ``blocks``."""
    blocks = list(blocks)
    if not blocks:
        raise ContractError("need at least one Jacobian block")
    mats = [_as_matrix(b) for b in blocks]
    rows = {m.shape[0] for m in mats}
    if len(rows) != 1:
        raise ContractError(f"Jacobian blocks have different row counts {sorted(rows)}")
    j = np.hstack([np.atleast_2d(m.T).T for m in mats])
    norms = np.linalg.norm(j, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(j)):
        raise NumericError("Jacobian block has a zero or non-finite column")
    u, s, _ = np.linalg.svd(j / norms, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > MAX_CONDITION:
        raise NumericError(f"combined Jacobian is rank deficient or ill-conditioned (condition {cond:.3e})")
    kinds = tuple(b.kind for b in blocks if isinstance(b, JacobianBlock))
    points = {b.point for b in blocks if isinstance(b, JacobianBlock)}
    return ProjectionOperator(u, kinds, points.pop() if len(points) == 1 else "", float(cond))


def _range_basis(p) -> np.ndarray:
    if isinstance(p, ProjectionOperator):
        return sla.null_space(p.basis.T) if p.d else np.eye(p.dim)
    p = np.asarray(p, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (p + p.T))
    return vecs[:, vals > 0.5]


def principal_angles(p_a, p_b) -> np.ndarray:
    """Principal angles (degrees, ascending) between the ranges of two projectors.

    For two operators with the same number of projected-out directions the
    angles are obtained from the small bases: the nonzero principal angles
    between two subspaces of equal dimension coincide with those between
    their orthogonal complements.  Otherwise the first ``min`` dimension
    angles between the dense range bases are returned.
    """
    dims = [p.dim if isinstance(p, ProjectionOperator) else np.asarray(p).shape[0] for p in (p_a, p_b)]
    if dims[0] != dims[1]:
        raise ContractError(f"projectors act on different spaces ({dims[0]} vs {dims[1]})")
    if isinstance(p_a, ProjectionOperator) and isinstance(p_b, ProjectionOperator) and p_a.d == p_b.d:
        q = p_a.rank
        if p_a.d == 0:
            return np.zeros(q)
        ang = np.sort(sla.subspace_angles(p_a.basis, p_b.basis))[::-1][: min(p_a.d, q)]
        out = np.zeros(q)
        out[: ang.size] = ang
    else:
        va, vb = _range_basis(p_a), _range_basis(p_b)
        if va.shape[1] == 0 or vb.shape[1] == 0:
            return np.zeros(0)
        out = sla.subspace_angles(va, vb)
    return np.sort(np.degrees(out))


def theta_max(p_a, p_b) -> float:
    ang = principal_angles(p_a, p_b)
    return float(ang[-1]) if ang.size else 0.0


def frobenius_discrepancy(j, j_ref) -> float:
    """``||J - J_ref||_F / ||J_ref||_F``."""
    j, j_ref = _as_matrix(j), _as_matrix(j_ref)
    if j.shape != j_ref.shape:
        raise ContractError(f"shape mismatch {j.shape} vs {j_ref.shape}")
    ref = np.linalg.norm(j_ref)
    if ref == 0:
        raise DomainError("reference Jacobian has zero norm")
    return float(np.linalg.norm(j - j_ref) / ref)


# ----------------------------------------------------------------------------
# Signals
# ----------------------------------------------------------------------------

SIGNALS = ("s_sigma", "s_zeta", "s_combined")


@dataclass(frozen=True, eq=False)
class SignalBundle:
    """sigma-, zeta- and combined signals plus their projections."""

    s_sigma: np.ndarray
    s_zeta: np.ndarray
    s_combined: np.ndarray
    projected: dict = field(default_factory=dict)

    def norms(self) -> dict:
        """``{row: {signal: 2-norm}}`` with row ``"none"`` for the raw signals."""
        rows = {"none": {k: float(np.linalg.norm(getattr(self, k))) for k in SIGNALS}}
        for name, sig in self.projected.items():
            rows[name] = {k: float(np.linalg.norm(v)) for k, v in sig.items()}
        return rows


def signal_bundle(u00, u_s0, u_0z, u_sz, projections=()) -> SignalBundle:
    """Signals relative to the background measurement ``u00 = U(sigma0, zeta0)``.

    ``projections`` is a sequence of operators or a ``{name: operator}`` mapping.
    """
    vecs = [np.asarray(v, dtype=float).ravel() for v in (u00, u_s0, u_0z, u_sz)]
    if len({v.size for v in vecs}) != 1:
        raise ContractError(f"measurement vectors differ in length: {[v.size for v in vecs]}")
    base = vecs[0]
    s = {"s_sigma": vecs[1] - base, "s_zeta": vecs[2] - base, "s_combined": vecs[3] - base}
    if not isinstance(projections, dict):
        projections = {p.name: p for p in projections}
    projected = {name: {k: p.apply(v) for k, v in s.items()} for name, p in projections.items()}
    return SignalBundle(projected=projected, **s)


def write_norms_table(path, bundle_or_rows) -> None:
    """Table with one row per projection and one column per signal."""
    rows = bundle_or_rows.norms() if isinstance(bundle_or_rows, SignalBundle) else bundle_or_rows
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["projection", *SIGNALS])
        for name, vals in rows.items():
            w.writerow([name, *(repr(vals[k]) for k in SIGNALS)])


def write_angles_report(path, theta_max_deg, err_f, seed=None) -> dict:
    """Per-draw ``draw,theta_max_deg,err_F`` rows followed by max/mean/std summary rows."""
    t = np.asarray(theta_max_deg, dtype=float)
    e = np.asarray(err_f, dtype=float)
    summary = {
        "max": (float(t.max()), float(e.max())),
        "mean": (float(t.mean()), float(e.mean())),
        "std": (float(t.std()), float(e.std())),
    }
    with open(path, "w", newline="") as fh:
        if seed is not None:
            fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["draw", "theta_max_deg", "err_F"])
        for k, (a, b) in enumerate(zip(t, e)):
            w.writerow([k + 1, repr(float(a)), repr(float(b))])
        for name, (a, b) in summary.items():
            w.writerow([name, repr(a), repr(b)])
    return summary
