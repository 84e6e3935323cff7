"""Tetrahedral meshes, cylinder-tank phantoms and disk electrode layouts.

An electrode is the intersection of the boundary with a circular cylinder of
radius ``R`` whose axis is the surface normal at the electrode centre.  On the
electrode we use the polar coordinates ``(r, psi)`` induced by that cylinder.
The patch of an electrode is the set of boundary faces whose barycentre lies
inside the cylinder; the contact integrals are evaluated with a fixed
face-subdivision quadrature on every face the cylinder touches, with the
contact profile continued by zero outside ``r < R``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .errors import ConfigError, DomainError, MeshParseError, ResourceError, ValidationError

#: Edge subdivision used for the surface quadrature: 7**2 = 49 sub-triangles per face.
SUBDIVISION = 7
MIN_TET_VOLUME = 1e-18

_TET_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


# ----------------------------------------------------------------------------
# Mesh
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """Linear tetrahedral mesh with oriented boundary faces.

    Attributes
    ----------
    nodes : (n, 3) float array, metres
    tets : (n_tets, 4) int array, positively oriented
    boundary_faces : (n_faces, 3) int array, ordered so that the right-hand
        normal points out of the domain
    normals : (n_faces, 3) outward unit normals
    regions : (n_tets,) int labels
    """

    nodes: np.ndarray
    tets: np.ndarray
    boundary_faces: np.ndarray
    normals: np.ndarray
    regions: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @cached_property
    def volumes(self) -> np.ndarray:
        p = self.nodes[self.tets]
        return np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0]) / 6.0

    @cached_property
    def gradients(self) -> np.ndarray:
        """Gradients of the four hat functions on each tetrahedron, ``(n_tets, 4, 3)``."""
        p = self.nodes[self.tets]
        a = np.concatenate([np.ones((self.n_tets, 4, 1)), p], axis=2)
        inv = np.linalg.inv(a)
        return np.transpose(inv[:, 1:, :], (0, 2, 1))

    @cached_property
    def face_areas(self) -> np.ndarray:
        p = self.nodes[self.boundary_faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def face_barycenters(self) -> np.ndarray:
        return self.nodes[self.boundary_faces].mean(axis=1)

    @cached_property
    def nodal_volumes(self) -> np.ndarray:
        """Lumped volume per node (a quarter of each adjacent tetrahedron)."""
        return np.bincount(self.tets.ravel(), np.repeat(self.volumes / 4.0, 4), minlength=self.n_nodes)

    @property
    def volume(self) -> float:
        return float(self.volumes.sum())

    @property
    def boundary_area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_faces)

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """Unweighted element stiffness matrices ``|T| G_T G_T^T``, ``(n_tets, 4, 4)``."""
        g = self.gradients
        return self.volumes[:, None, None] * np.einsum("tac,tbc->tab", g, g)

    @cached_property
    def _csr_pattern(self):
        rows = np.repeat(self.tets, 4, axis=1).ravel()
        cols = np.tile(self.tets, (1, 4)).ravel()
        key = rows.astype(np.int64) * self.n_nodes + cols
        uniq, where = np.unique(key, return_inverse=True)
        r, c = np.divmod(uniq, self.n_nodes)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=self.n_nodes))])
        return indptr, c.astype(np.int32), where.ravel(), uniq.size

    def stiffness(self, weights=None) -> sp.csr_matrix:
        """P1 stiffness ``sum_T w_T |T| G_T G_T^T`` with one weight per tetrahedron."""
        indptr, indices, where, nnz = self._csr_pattern
        loc = self.local_stiffness if weights is None else np.asarray(weights)[:, None, None] * self.local_stiffness
        data = np.bincount(where, loc.ravel(), minlength=nnz)
        return sp.csr_matrix((data, indices, indptr), shape=(self.n_nodes, self.n_nodes))

    def interpolate(self, values: np.ndarray, points: np.ndarray, fill: float = np.nan) -> np.ndarray:
        """Evaluate a nodal P1 field at arbitrary points.

        Points outside the mesh receive ``fill``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(points.shape[0], fill)
        found = np.zeros(points.shape[0], dtype=bool)
        centroids = self.nodes[self.tets].mean(axis=1)
        k = min(48, self.n_tets)
        _, cand = cKDTree(centroids).query(points, k=k)
        cand = cand.reshape(points.shape[0], k)
        grads = self.gradients
        p0 = self.nodes[self.tets[:, 0]]
        for j in range(k):
            t = cand[:, j]
            # barycentric coordinates from hat-function gradients
            lam = np.einsum("pac,pc->pa", grads[t], points - p0[t])
            lam[:, 0] += 1.0
            hit = ~found & np.all(lam >= -1e-10, axis=1)
            out[hit] = np.einsum("pa,pa->p", lam, values[self.tets[t]])[hit]
            found |= hit
        return out


def _tet_faces(tets: np.ndarray):
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    owner = np.repeat(np.arange(tets.shape[0]), 4)
    opposite = tets.reshape(-1)
    return faces, owner, opposite


def _orient_faces(nodes, faces, opposite_nodes):
    p = nodes[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    inward = np.einsum("ij,ij->i", n, nodes[opposite_nodes] - p[:, 0]) > 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    n[inward] *= -1
    norms = np.linalg.norm(n, axis=1)
    return faces, n / norms[:, None]


def _orient_tets(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    vol = np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0])
    tets = tets.copy()
    neg = vol < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return tets


def mesh_from_tets(nodes, tets, regions=None) -> Mesh:
    """Build a :class:`Mesh`, extracting boundary faces as faces owned by one tetrahedron."""
    nodes = np.ascontiguousarray(nodes, dtype=float)
    tets = _orient_tets(nodes, np.asarray(tets, dtype=np.int64))
    faces, _, opposite = _tet_faces(tets)
    key = np.sort(faces, axis=1)
    _, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    single = np.sort(first[counts == 1])
    bfaces, normals = _orient_faces(nodes, faces[single], opposite[single])
    if regions is None:
        regions = np.zeros(tets.shape[0], dtype=np.int64)
    mesh = Mesh(nodes, tets, bfaces, normals, np.asarray(regions, dtype=np.int64))
    validate_mesh(mesh)
    return mesh


def mesh_with_faces(nodes, tets, boundary_faces, regions=None) -> Mesh:
    """Build a mesh from an explicit boundary-face list, checking each face has one owner."""
    nodes = np.ascontiguousarray(nodes, dtype=float)
    tets = np.asarray(tets, dtype=np.int64)
    boundary_faces = np.asarray(boundary_faces, dtype=np.int64).reshape(-1, 3)
    n = nodes.shape[0]
    for name, arr in (("tet", tets), ("boundary face", boundary_faces)):
        bad = np.flatnonzero(np.any((arr < 0) | (arr >= n), axis=1))
        if bad.size:
            raise ValidationError(f"{name} {int(bad[0])} references a node index out of range")
    tets = _orient_tets(nodes, tets)
    faces, _, opposite = _tet_faces(tets)
    key = np.sort(faces, axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    lookup = {tuple(row): i for i, row in enumerate(uniq)}
    opp_of_unique = np.empty(uniq.shape[0], dtype=np.int64)
    opp_of_unique[inverse] = opposite
    opp = np.empty(boundary_faces.shape[0], dtype=np.int64)
    for i, f in enumerate(np.sort(boundary_faces, axis=1)):
        j = lookup.get(tuple(f))
        if j is None:
            raise ValidationError(f"boundary face {i} {f.tolist()} is not a face of any tetrahedron")
        if counts[j] != 1:
            raise ValidationError(f"boundary face {i} {f.tolist()} is shared by {counts[j]} tetrahedra")
        opp[i] = opp_of_unique[j]
    bfaces, normals = _orient_faces(nodes, boundary_faces, opp)
    if regions is None:
        regions = np.zeros(tets.shape[0], dtype=np.int64)
    mesh = Mesh(nodes, tets, bfaces, normals, np.asarray(regions, dtype=np.int64))
    validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: Mesh) -> None:
    n = mesh.n_nodes
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 3:
        raise ValidationError("nodes must be an (n, 3) array")
    if not np.all(np.isfinite(mesh.nodes)):
        raise ValidationError("nodes contain non-finite coordinates")
    bad = np.flatnonzero(np.any((mesh.tets < 0) | (mesh.tets >= n), axis=1))
    if bad.size:
        raise ValidationError(f"tet {int(bad[0])} references a node index out of range")
    small = np.flatnonzero(mesh.volumes <= MIN_TET_VOLUME)
    if small.size:
        raise ValidationError(f"tet {int(small[0])} is degenerate (volume {mesh.volumes[small[0]]:.3e} m^3)")
    if mesh.regions.shape[0] != mesh.n_tets:
        raise ValidationError("regions must hold one label per tetrahedron")
    if mesh.boundary_faces.shape[0] == 0:
        raise ValidationError("mesh has no boundary faces")


# ----------------------------------------------------------------------------
# Electrodes
# ----------------------------------------------------------------------------


def _subdivision_barycentric(k: int = SUBDIVISION) -> np.ndarray:
    """Barycentric coordinates of the centroids of a k-fold uniform face subdivision."""
    pts = []
    for i in range(k):
        for j in range(k - i):
            pts.append(((3 * i + 1) / (3 * k), (3 * j + 1) / (3 * k)))
            if i + j <= k - 2:
                pts.append(((3 * i + 2) / (3 * k), (3 * j + 2) / (3 * k)))
    ab = np.array(pts)
    return np.column_stack([1.0 - ab.sum(axis=1), ab])


_BARY = _subdivision_barycentric()


@dataclass(frozen=True, eq=False)
class Quadrature:
    """Surface quadrature on the faces touched by one electrode.

    ``h_theta``/``h_phi`` are the electrode movement fields at the quadrature
    points: tangent to the face, with constant length over the electrode.
    """

    faces: np.ndarray
    nodes: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    h_theta: np.ndarray
    h_phi: np.ndarray

    @property
    def n_points(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CylinderSurface:
    """Lateral surface of an upright cylinder; ``origin`` is the bottom-face centre."""

    radius: float
    height: float
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class Electrode:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    faces: np.ndarray
    theta: float
    phi: float
    quad: Quadrature = field(repr=False)

    @cached_property
    def frame(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal basis (e1, e2) of the plane orthogonal to the axis."""
        n = self.axis
        e2 = np.array([0.0, 0.0, 1.0]) - n[2] * n
        if np.linalg.norm(e2) < 1e-8:
            e2 = np.array([1.0, 0.0, 0.0]) - n[0] * n
        e2 /= np.linalg.norm(e2)
        e1 = np.cross(e2, n)
        return e1, e2

    def polar(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised ``(r, psi)`` for points; no domain check."""
        d = np.asarray(points, dtype=float) - self.center
        e1, e2 = self.frame
        a, b = d @ e1, d @ e2
        return np.hypot(a, b), np.mod(np.arctan2(b, a), 2 * np.pi)


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    electrodes: tuple
    origin: np.ndarray
    surface: CylinderSurface | None = None

    @property
    def M(self) -> int:
        return len(self.electrodes)

    def __len__(self) -> int:
        return self.M

    def __getitem__(self, m: int) -> Electrode:
        return self.electrodes[m]

    @property
    def radii(self) -> np.ndarray:
        return np.array([e.radius for e in self.electrodes])

    def patch_areas(self, mesh: Mesh) -> np.ndarray:
        return np.array([mesh.face_areas[e.faces].sum() for e in self.electrodes])

    def moved(self, mesh: Mesh, m: int, dtheta: float = 0.0, dphi: float = 0.0) -> "ElectrodeLayout":
        """Layout with electrode ``m`` displaced in its polar/azimuthal angle.

        The mesh is unchanged; only the electrode's defining cylinder and the
        quadrature support are recomputed.
        """
        e = self.electrodes[m]
        center, axis = _center_from_angles(self, e, e.theta + dtheta, e.phi + dphi)
        new = _make_electrode(mesh, self, center, axis, e.radius, e.faces, e.theta + dtheta, e.phi + dphi)
        els = list(self.electrodes)
        els[m] = new
        return replace(self, electrodes=tuple(els))


def _rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _center_from_angles(layout: ElectrodeLayout, e: Electrode, theta: float, phi: float):
    o = layout.origin
    surf = layout.surface
    if surf is not None:
        rho = surf.radius
        center = o + np.array([rho * math.cos(phi), rho * math.sin(phi), rho / math.tan(theta)])
        axis = np.array([math.cos(phi), math.sin(phi), 0.0])
        return center, axis
    # generic surface: rigid rotations about the origin
    rz = _rotation_z(phi - e.phi)
    center = o + rz @ (e.center - o)
    axis = rz @ e.axis
    e_phi = np.array([-math.sin(phi), math.cos(phi), 0.0])
    rt = _rotation(e_phi, theta - e.theta)
    return o + rt @ (center - o), rt @ axis


def _angles(origin: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    d = x - origin
    t = np.linalg.norm(d)
    return math.acos(np.clip(d[2] / t, -1.0, 1.0)), math.atan2(d[1], d[0]) % (2 * math.pi)


def _movement_fields(layout: ElectrodeLayout, center, axis, theta, phi, points, normals):
    """Tangent fields for polar/azimuthal movement at quadrature points.

    Directions come from the boundary parametrization; each vector is made
    tangent to its face and rescaled to the length it has at the centre.
    """
    o = layout.origin
    surf = layout.surface
    shape = points.shape
    pts = points.reshape(-1, 3)
    nrm = np.repeat(normals, shape[1], axis=0)
    if surf is not None:
        rho = surf.radius
        len_phi = rho
        len_theta = rho / math.sin(theta) ** 2
        xp = pts - o
        xp[:, 2] = 0.0
        dir_phi = np.cross(np.array([0.0, 0.0, 1.0]), xp)
        dir_theta = np.tile(np.array([0.0, 0.0, -1.0]), (pts.shape[0], 1))
    else:
        d_c = center - o
        t_c = np.linalg.norm(d_c)

        def ray_tangents(dvec, nvec):
            t = np.linalg.norm(dvec, axis=-1, keepdims=True)
            d = dvec / t
            th = np.arccos(np.clip(d[..., 2], -1, 1))
            ph = np.arctan2(d[..., 1], d[..., 0])
            d_th = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)], axis=-1)
            d_ph = np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)], axis=-1)
            dn = np.sum(d * nvec, axis=-1, keepdims=True)
            dn = np.where(np.abs(dn) < 1e-12, 1e-12, dn)
            v_th = t * (d_th - np.sum(d_th * nvec, axis=-1, keepdims=True) / dn * d)
            v_ph = t * (d_ph - np.sum(d_ph * nvec, axis=-1, keepdims=True) / dn * d)
            return v_th, v_ph

        vt_c, vp_c = ray_tangents(d_c[None, :], axis[None, :])
        len_theta, len_phi = float(np.linalg.norm(vt_c)), float(np.linalg.norm(vp_c))
        dir_theta, dir_phi = ray_tangents(pts - o, nrm)
    out = []
    for vec, length in ((dir_theta, len_theta), (dir_phi, len_phi)):
        vec = vec - np.sum(vec * nrm, axis=1, keepdims=True) * nrm
        nv = np.linalg.norm(vec, axis=1, keepdims=True)
        nv[nv == 0] = 1.0
        out.append((length * vec / nv).reshape(shape))
    return out


def _make_electrode(mesh: Mesh, layout: ElectrodeLayout, center, axis, radius, patch_faces, theta, phi) -> Electrode:
    center = np.asarray(center, dtype=float)
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    stub = Electrode(center, axis, float(radius), np.asarray(patch_faces, dtype=np.int64), theta, phi, None)
    bc = mesh.face_barycenters
    fa = mesh.face_areas
    # candidate faces: anything whose circumscribing ball can reach the disk
    reach = np.sqrt(fa) * 2.0 + radius * 1.5
    cand = np.flatnonzero(np.linalg.norm(bc - center, axis=1) < reach)
    cand = np.union1d(cand, stub.faces)
    fn = mesh.boundary_faces[cand]
    pts = np.einsum("qa,fac->fqc", _BARY, mesh.nodes[fn])
    r, _ = stub.polar(pts.reshape(-1, 3))
    near = np.linalg.norm(pts.reshape(-1, 3) - center, axis=1) < 1.5 * radius
    touched = ((r < radius) & near).reshape(pts.shape[:2]).any(axis=1)
    keep = touched | np.isin(cand, stub.faces)
    faces = cand[keep]
    pts = pts[keep]
    weights = np.repeat(fa[faces][:, None] / _BARY.shape[0], _BARY.shape[0], axis=1)
    h_theta, h_phi = _movement_fields(layout, center, axis, theta, phi, pts, mesh.normals[faces])
    quad = Quadrature(faces, mesh.boundary_faces[faces], _BARY, pts, weights, h_theta, h_phi)
    return replace(stub, quad=quad)


def patch_faces_for(mesh: Mesh, center, axis, radius) -> np.ndarray:
    """Boundary faces whose barycentre lies inside the electrode's defining cylinder."""
    stub = Electrode(np.asarray(center, float), np.asarray(axis, float), radius, np.zeros(0, np.int64), 0.0, 0.0, None)
    bc = mesh.face_barycenters
    r, _ = stub.polar(bc)
    near = np.linalg.norm(bc - stub.center, axis=1) < 1.5 * radius
    return np.flatnonzero((r < radius) & near)


def build_layout(
    mesh: Mesh,
    centers: Sequence,
    radii,
    faces: Sequence | None = None,
    axes: Sequence | None = None,
    origin=None,
    surface: CylinderSurface | None = None,
) -> ElectrodeLayout:
    """Assemble and validate an electrode layout on ``mesh``.

    Missing patch face lists are found with the barycentre rule; missing axes
    are the area-weighted mean normal of the patch faces.
    """
    centers = [np.asarray(c, dtype=float) for c in centers]
    M = len(centers)
    if M < 2:
        raise ValidationError(f"an electrode layout needs at least 2 electrodes, got {M}")
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (M,))
    if np.any(radii <= 0):
        raise ValidationError(f"electrode {int(np.argmin(radii))} has non-positive radius")
    if origin is None:
        lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
        origin = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
    origin = np.asarray(origin, dtype=float)
    layout = ElectrodeLayout((), origin, surface)
    electrodes = []
    for m in range(M):
        c = centers[m]
        if faces is not None:
            pf = np.asarray(faces[m], dtype=np.int64)
            if pf.size and (pf.min() < 0 or pf.max() >= mesh.boundary_faces.shape[0]):
                raise ValidationError(f"electrode {m} references a boundary face out of range")
        else:
            pf = None
        if axes is not None and axes[m] is not None:
            n = np.asarray(axes[m], dtype=float)
        elif pf is not None and pf.size:
            n = (mesh.normals[pf] * mesh.face_areas[pf, None]).sum(axis=0)
        else:
            # nearest boundary face normal
            n = mesh.normals[np.argmin(np.linalg.norm(mesh.face_barycenters - c, axis=1))]
        n = n / np.linalg.norm(n)
        if pf is None:
            pf = patch_faces_for(mesh, c, n, radii[m])
        if pf.size == 0:
            raise ValidationError(f"electrode {m} covers no boundary face")
        theta, phi = _angles(origin, c)
        electrodes.append(_make_electrode(mesh, layout, c, n, radii[m], pf, theta, phi))
    layout = replace(layout, electrodes=tuple(electrodes))
    validate_layout(mesh, layout)
    return layout


def validate_layout(mesh: Mesh, layout: ElectrodeLayout) -> None:
    if layout.M < 2:
        raise ValidationError("an electrode layout needs at least 2 electrodes")
    owner = np.full(mesh.boundary_faces.shape[0], -1)
    for m, e in enumerate(layout.electrodes):
        for kind, fs in (("patch", e.faces), ("contact support", e.quad.faces)):
            clash = fs[(owner[fs] >= 0) & (owner[fs] != m)]
            if clash.size:
                raise ValidationError(
                    f"boundary face {int(clash[0])} belongs to electrodes {int(owner[clash[0]])} and {m} ({kind})"
                )
            owner[fs] = m
        r, _ = e.polar(mesh.face_barycenters[e.faces])
        if np.any(r >= e.radius) and layout.surface is not None:
            bad = e.faces[np.argmax(r)]
            raise ValidationError(f"patch face {int(bad)} of electrode {m} lies outside its disk")


def local_polar(layout: ElectrodeLayout, m: int, x) -> tuple[float, float]:
    """Polar coordinates ``(r, psi)`` of a boundary point on electrode ``m``."""
    e = layout.electrodes[m]
    x = np.asarray(x, dtype=float)
    r, psi = e.polar(x[None, :])
    if r[0] >= e.radius or np.linalg.norm(x - e.center) >= 1.5 * e.radius:
        raise DomainError(f"point {x.tolist()} is not on electrode {m} (r = {r[0]:.3e} m, R = {e.radius:.3e} m)")
    return float(r[0]), float(psi[0])


# ----------------------------------------------------------------------------
# Cylinder tank generator
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ElectrodeSpec:
    """Disk electrodes on the lateral tank wall, evenly spaced per ring.

    ``ring_heights`` defaults to a single ring at half the water height.
    Electrodes are numbered counterclockwise, ring by ring, starting at
    azimuth ``phase`` (radians).
    """

    count: int = 16
    radius: float = 0.005
    ring_heights: tuple | None = None
    phase: float = 0.0


def _graded_positions(length: float, size, closed: bool, min_count: int = 1) -> np.ndarray:
    s = np.linspace(0.0, length, 8001)
    dens = 1.0 / size(s)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
    n = max(int(math.ceil(cum[-1] - 1e-9)), min_count)
    if closed:
        targets = np.arange(n) * cum[-1] / n
    else:
        targets = np.linspace(0.0, cum[-1], n + 1)
    return np.interp(targets, cum, s)


def _level_sizes(radius: float, level: int) -> tuple[float, float, float]:
    """Electrode-local size, maximum size and grading slope (m, m, m/m) for a level."""
    scale = 1.6 ** (-level)
    return 0.85 * radius * scale, 0.04 * scale, 0.65 * scale


def _wall_angles(radius, per_ring, R, phase, h_e, h_max, grade) -> np.ndarray:
    """Boundary azimuths, identical in every sector between neighbouring electrodes."""
    sector = 2 * math.pi * radius / per_ring

    def size_s(s):
        d = np.minimum(s, sector - s)
        return np.minimum(h_max, h_e + grade * np.maximum(0.0, d - R))

    s = _graded_positions(sector, size_s, closed=False, min_count=2)[:-1]
    ang = (s[None, :] + sector * np.arange(per_ring)[:, None]).ravel() / radius
    return ang + phase


def _layer_heights(height, rings, R, h_e, h_max, grade) -> np.ndarray:
    def size_z(z):
        d = np.min(np.abs(z[:, None] - np.asarray(rings)[None, :]), axis=1)
        return np.minimum(h_max, h_e + grade * np.maximum(0.0, d - R))

    return _graded_positions(height, size_z, closed=False, min_count=2)


def _wall_patch_error(radius, angles, zs, centers, R) -> float:
    """Worst relative patch-area error of the barycentre rule on the extruded wall grid."""
    nb = angles.size
    i = np.arange(nb)
    j = (i + 1) % nb
    hi = np.maximum(i, j)
    lo = np.minimum(i, j)
    xy = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    worst = 0.0
    for c in centers:
        n = np.array([c[0], c[1], 0.0]) / radius
        zsel = np.flatnonzero(np.abs(zs - c[2]) < R + np.max(np.diff(zs)))
        ksel = zsel[zsel < zs.size - 1]
        ang_c = math.atan2(c[1], c[0])
        near = np.flatnonzero(np.abs(np.angle(np.exp(1j * (angles - ang_c)))) < 2 * R / radius + 0.2)
        e_sel = np.union1d(near, (near - 1) % nb)
        area = 0.0
        for k in ksel:
            z0, z1 = zs[k], zs[k + 1]
            for e in e_sel:
                bh, bl = np.append(xy[hi[e]], z0), np.append(xy[lo[e]], z0)
                th, tl = np.append(xy[hi[e]], z1), np.append(xy[lo[e]], z1)
                for tri in ((bl, bh, tl), (bh, tl, th)):
                    bc = (tri[0] + tri[1] + tri[2]) / 3 - c
                    r = np.linalg.norm(bc - (bc @ n) * n)
                    if r < R and np.linalg.norm(bc) < 1.5 * R:
                        area += 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        worst = max(worst, abs(area / (math.pi * R * R) - 1.0))
    return worst


def generate_cylinder_tank(
    radius: float = 0.115,
    water_height: float = 0.043,
    electrode_spec: ElectrodeSpec | None = None,
    refinement_level: int = 1,
    max_nodes: int = 250_000,
) -> tuple[Mesh, ElectrodeLayout]:
    """Tetrahedral mesh of a water-filled cylinder with disk electrodes on its wall.

    A graded disk triangulation (fine next to the electrodes) is extruded over
    graded layers (fine at the electrode rings); every prism is split into
    three tetrahedra with a globally consistent diagonal rule.  Each
    refinement level shrinks all target sizes by a factor 1.6.  The
    electrode-local size is picked within 12% of its nominal value so that the
    face-quantized patch areas best match the disk area.
    """
    spec = electrode_spec or ElectrodeSpec()
    if radius <= 0 or water_height <= 0 or spec.radius <= 0:
        raise ConfigError("tank radius, water height and electrode radius must be positive")
    if spec.count < 2:
        raise ConfigError(f"need at least 2 electrodes, got {spec.count}")
    if refinement_level < 0:
        raise ConfigError("refinement_level must be non-negative")
    R = spec.radius
    rings = tuple(spec.ring_heights) if spec.ring_heights else (water_height / 2,)
    if spec.count % len(rings):
        raise ConfigError(f"{spec.count} electrodes cannot be split evenly over {len(rings)} rings")
    per_ring = spec.count // len(rings)
    for z in rings:
        if z - R <= 0 or z + R >= water_height:
            raise ConfigError(f"electrode ring at z = {z} m does not fit inside the water column")
    if per_ring > 1 and 2 * radius * math.sin(math.pi / per_ring) <= 2 * R:
        raise ConfigError(f"{per_ring} electrodes of radius {R} m overlap on a tank of radius {radius} m")
    if 2 * R >= 2 * math.pi * radius / 2:
        raise ConfigError("electrode radius is too large for the tank")
    srt = sorted(rings)
    if any(b - a <= 2 * R for a, b in zip(srt, srt[1:])):
        raise ConfigError("electrode rings overlap")

    h_nominal, h_max, grade = _level_sizes(R, refinement_level)
    azimuths = spec.phase + 2 * math.pi * np.arange(per_ring) / per_ring
    centers = np.array([[radius * math.cos(p), radius * math.sin(p), z] for z in rings for p in azimuths])

    best = None
    for f in np.linspace(0.88, 1.12, 49):
        h_try = h_nominal * f
        hm = max(h_max, h_try)
        ang = _wall_angles(radius, per_ring, R, spec.phase, h_try, hm, grade)
        zs_try = _layer_heights(water_height, rings, R, h_try, hm, grade)
        ring_centres = centers[:: per_ring] if len(rings) > 1 else centers[:1]
        err = _wall_patch_error(radius, ang, zs_try, ring_centres, R)
        key = (err, abs(f - 1.0))
        if best is None or key < best[0]:
            best = (key, h_try)
    h_e = best[1]
    h_max = max(h_max, h_e)
    foot = radius * np.column_stack([np.cos(azimuths), np.sin(azimuths)])

    def size2d(p):
        d = np.min(np.linalg.norm(p[:, None, :] - foot[None, :, :], axis=2), axis=1)
        return np.minimum(h_max, h_e + grade * np.maximum(0.0, d - R))

    def ring_points(rad):
        circ = 2 * math.pi * rad

        def size_s(s):
            a = s / rad
            return size2d(rad * np.column_stack([np.cos(a), np.sin(a)]))

        s = _graded_positions(circ, size_s, closed=True, min_count=6)
        a = s / rad
        return rad * np.column_stack([np.cos(a), np.sin(a)])

    wall = _wall_angles(radius, per_ring, R, spec.phase, h_e, h_max, grade)
    tree_pts = radius * np.column_stack([np.cos(wall), np.sin(wall)])
    depth = 0.0
    while True:
        depth += min(h_max, h_e + grade * max(0.0, depth - R))
        rad = radius - depth
        if rad < 0.5 * h_max:
            break
        cand = ring_points(rad)
        dist, _ = cKDTree(tree_pts).query(cand)
        cand = cand[dist >= 0.7 * size2d(cand)]
        if cand.size:
            tree_pts = np.vstack([tree_pts, cand])
    centre = np.zeros((1, 2))
    if cKDTree(tree_pts).query(centre)[0][0] >= 0.5 * h_max:
        tree_pts = np.vstack([tree_pts, centre])
    p2 = tree_pts
    tri = Delaunay(p2).simplices
    d1, d2 = p2[tri[:, 1]] - p2[tri[:, 0]], p2[tri[:, 2]] - p2[tri[:, 0]]
    a2 = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    tri = np.sort(tri[a2 > 1e-14], axis=1)

    zs = _layer_heights(water_height, rings, R, h_e, h_max, grade)
    n2, nz = p2.shape[0], zs.size
    n_nodes = n2 * nz
    if n_nodes > max_nodes:
        raise ResourceError(f"refinement level {refinement_level} needs {n_nodes} nodes (budget {max_nodes})")
    nodes = np.column_stack([np.tile(p2, (nz, 1)), np.repeat(zs, n2)])
    tets = []
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    for k in range(nz - 1):
        lo, hi = k * n2, (k + 1) * n2
        tets.append(np.column_stack([a + lo, b + lo, c + lo, a + hi]))
        tets.append(np.column_stack([b + lo, c + lo, a + hi, b + hi]))
        tets.append(np.column_stack([c + lo, a + hi, b + hi, c + hi]))
    mesh = mesh_from_tets(nodes, np.vstack(tets))

    axes = [[c[0] / radius, c[1] / radius, 0.0] for c in centers]
    surface = CylinderSurface(radius, water_height, (0.0, 0.0, 0.0))
    layout = build_layout(mesh, centers, R, axes=axes, origin=np.zeros(3), surface=surface)
    return mesh, layout


def label_regions(mesh: Mesh, inside) -> Mesh:
    """Copy of ``mesh`` with tets whose centroid satisfies ``inside`` labelled 1."""
    centroids = mesh.nodes[mesh.tets].mean(axis=1)
    labels = np.asarray(inside(centroids), dtype=np.int64)
    return replace(mesh, regions=labels)


# ----------------------------------------------------------------------------
# JSON document
# ----------------------------------------------------------------------------


def mesh_document(mesh: Mesh, layout: ElectrodeLayout) -> dict:
    doc = {
        "nodes": mesh.nodes.tolist(),
        "tets": mesh.tets.tolist(),
        "boundary_faces": mesh.boundary_faces.tolist(),
        "regions": mesh.regions.tolist(),
        "electrodes": [
            {"center": e.center.tolist(), "radius": e.radius, "faces": e.faces.tolist(), "axis": e.axis.tolist()}
            for e in layout.electrodes
        ],
        "origin": layout.origin.tolist(),
    }
    if layout.surface is not None:
        s = layout.surface
        doc["surface"] = {"kind": "cylinder", "radius": s.radius, "height": s.height, "origin": list(s.origin)}
    return doc


def save_mesh(path, mesh: Mesh, layout: ElectrodeLayout) -> None:
    Path(path).write_text(json.dumps(mesh_document(mesh, layout)))


def mesh_from_document(doc: dict) -> tuple[Mesh, ElectrodeLayout]:
    try:
        nodes = np.array(doc["nodes"], dtype=float)
        tets = np.array(doc["tets"], dtype=np.int64)
        faces = np.array(doc["boundary_faces"], dtype=np.int64)
        regions = np.array(doc.get("regions", [0] * len(doc["tets"])), dtype=np.int64)
        els = doc["electrodes"]
        centers = [e["center"] for e in els]
        radii = [float(e["radius"]) for e in els]
        efaces = [e["faces"] for e in els]
        axes = [e.get("axis") for e in els]
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshParseError(f"malformed mesh document: {exc}") from exc
    if nodes.ndim != 2 or nodes.shape[1] != 3 or tets.ndim != 2 or tets.shape[1] != 4:
        raise MeshParseError("nodes must be [x, y, z] triples and tets 4-tuples")
    surface = None
    if "surface" in doc and doc["surface"].get("kind") == "cylinder":
        s = doc["surface"]
        surface = CylinderSurface(float(s["radius"]), float(s["height"]), tuple(s.get("origin", (0, 0, 0))))
    mesh = mesh_with_faces(nodes, tets, faces, regions)
    layout = build_layout(mesh, centers, radii, faces=efaces, axes=axes, origin=doc.get("origin"), surface=surface)
    return mesh, layout


def load_mesh(path) -> tuple[Mesh, ElectrodeLayout]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MeshParseError(f"{path}: {exc}") from exc
    return mesh_from_document(doc)
