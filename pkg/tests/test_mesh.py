import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eitproj.errors import ConfigError, DomainError, MeshParseError, ResourceError, ValidationError
from eitproj.mesh import (
    ElectrodeSpec,
    build_layout,
    generate_cylinder_tank,
    load_mesh,
    local_polar,
    mesh_document,
    mesh_from_document,
    mesh_from_tets,
    save_mesh,
    validate_mesh,
)


def test_mesh_invariants(small_tank):
    mesh, layout = small_tank
    validate_mesh(mesh)
    assert np.all(mesh.volumes > 1e-18)
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-12)
    # outward: normals point away from the axis on the wall and up/down on the lids
    bc = mesh.face_barycenters
    centroid = mesh.nodes.mean(axis=0)
    assert np.all(np.einsum("ij,ij->i", mesh.normals, bc - centroid) > 0)


def test_boundary_faces_have_one_owner(small_tank):
    mesh, _ = small_tank
    faces = np.sort(mesh.tets[:, [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]]].reshape(-1, 3), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    assert set(counts) <= {1, 2}
    assert np.sum(counts == 1) == mesh.boundary_faces.shape[0]


def test_partition_of_boundary_area(small_tank):
    mesh, layout = small_tank
    on_electrode = np.zeros(mesh.boundary_faces.shape[0], dtype=bool)
    for e in layout.electrodes:
        on_electrode[e.faces] = True
    total = layout.patch_areas(mesh).sum() + mesh.face_areas[~on_electrode].sum()
    assert abs(total - mesh.boundary_area) <= 1e-10 * mesh.boundary_area


def test_desk_tank_patch_areas():
    mesh, layout = generate_cylinder_tank(0.115, 0.043, ElectrodeSpec(32, 0.005), refinement_level=1)
    assert layout.M == 32
    areas = layout.patch_areas(mesh)
    target = math.pi * 0.005**2
    assert np.all(np.abs(areas / target - 1) < 0.10)
    faces = np.concatenate([e.faces for e in layout.electrodes])
    assert faces.size == np.unique(faces).size


def test_patch_area_converges_monotonically():
    target = 32 * math.pi * 0.005**2
    dev = []
    for level in (0, 1, 2):
        mesh, layout = generate_cylinder_tank(0.115, 0.043, ElectrodeSpec(32, 0.005), refinement_level=level)
        dev.append(abs(layout.patch_areas(mesh).sum() - target) / target)
    assert dev[0] > dev[1] > dev[2]


def test_volume_error_halves_per_level():
    exact = math.pi * 0.115**2 * 0.043
    err = []
    for level in (0, 1, 2):
        mesh, _ = generate_cylinder_tank(0.115, 0.043, ElectrodeSpec(16, 0.005), refinement_level=level)
        err.append(abs(mesh.volume - exact) / exact)
    assert err[1] <= 0.5 * err[0] and err[2] <= 0.5 * err[1]


def test_two_electrode_layout():
    mesh, layout = generate_cylinder_tank(0.05, 0.03, ElectrodeSpec(2, 0.005), refinement_level=0)
    assert layout.M == 2
    assert np.intersect1d(layout[0].quad.faces, layout[1].quad.faces).size == 0


def test_overlapping_electrodes_rejected():
    with pytest.raises(ConfigError):
        generate_cylinder_tank(0.02, 0.03, ElectrodeSpec(16, 0.005))


def test_node_budget():
    with pytest.raises(ResourceError):
        generate_cylinder_tank(0.115, 0.043, ElectrodeSpec(16, 0.005), refinement_level=2, max_nodes=1000)


def test_tangent_fields(small_tank):
    mesh, layout = small_tank
    for e in layout.electrodes:
        nrm = mesh.normals[e.quad.faces][:, None, :]
        for h in (e.quad.h_theta, e.quad.h_phi):
            assert np.max(np.abs(np.sum(h * nrm, axis=-1))) <= 1e-8 * np.max(np.linalg.norm(h, axis=-1))
            length = np.linalg.norm(h, axis=-1)
            assert np.ptp(length) <= 1e-10 * length.max()


def test_local_polar(small_tank):
    mesh, layout = small_tank
    e = layout[2]
    r, psi = local_polar(layout, 2, e.center)
    assert r == pytest.approx(0.0, abs=1e-15)
    # a point inside the patch: compare with the distance from the defining cylinder's axis
    pts = e.quad.points.reshape(-1, 3)
    rr = np.linalg.norm(np.cross(pts - e.center, e.axis), axis=1)
    k = np.flatnonzero((rr < 0.9 * e.radius) & (rr > 0.5 * e.radius))[0]
    r, psi = local_polar(layout, 2, pts[k])
    assert r == pytest.approx(rr[k], rel=1e-6)
    assert 0 <= psi < 2 * np.pi
    near_rim = np.flatnonzero(rr < e.radius)[np.argmax(rr[rr < e.radius])]
    assert local_polar(layout, 2, pts[near_rim])[0] > 0.9 * e.radius
    with pytest.raises(DomainError):
        local_polar(layout, 2, layout[3].center)


def _single_tet_document():
    nodes = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    return {
        "nodes": nodes,
        "tets": [[0, 1, 2, 3]],
        "boundary_faces": [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        "regions": [0],
        "electrodes": [
            {"center": [1 / 3, 1 / 3, 0.0], "radius": 0.05, "faces": [0]},
            {"center": [1 / 3, 0.0, 1 / 3], "radius": 0.05, "faces": [1]},
        ],
    }


def test_single_tetrahedron_document():
    mesh, layout = mesh_from_document(_single_tet_document())
    assert layout.M == 2
    assert mesh.n_tets == 1


def test_face_shared_by_two_electrodes_rejected():
    doc = _single_tet_document()
    doc["electrodes"][1]["faces"] = [0]
    doc["electrodes"][1]["center"] = [1 / 3, 1 / 3, 0.0]
    with pytest.raises(ValidationError):
        mesh_from_document(doc)


def test_degenerate_element_rejected():
    doc = _single_tet_document()
    doc["nodes"][3] = [1, 1, 0]
    with pytest.raises(ValidationError):
        mesh_from_document(doc)


def test_malformed_document(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(MeshParseError):
        load_mesh(p)
    with pytest.raises(MeshParseError):
        mesh_from_document({"nodes": [[0, 0, 0]]})


def test_round_trip(tmp_path, small_tank):
    mesh, layout = small_tank
    path = tmp_path / "tank.json"
    save_mesh(path, mesh, layout)
    mesh2, layout2 = load_mesh(path)
    assert np.array_equal(mesh.nodes, mesh2.nodes)
    assert np.array_equal(mesh.tets, mesh2.tets)
    assert np.array_equal(mesh.boundary_faces, mesh2.boundary_faces)
    for a, b in zip(layout.electrodes, layout2.electrodes):
        assert np.array_equal(a.faces, b.faces)
        assert np.array_equal(a.quad.faces, b.quad.faces)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"nodes", "tets", "boundary_faces", "regions", "electrodes"}


def test_moved_layout_keeps_mesh(small_tank):
    mesh, layout = small_tank
    moved = layout.moved(mesh, 1, dphi=1e-3)
    assert moved[1].phi == pytest.approx(layout[1].phi + 1e-3)
    np.testing.assert_allclose(np.linalg.norm(moved[1].center[:2]), 0.05, rtol=1e-12)
    assert moved[0] is layout[0]


@settings(max_examples=15, deadline=None)
@given(
    values=st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    bary=st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
)
def test_interpolation_is_exact_for_p1(values, bary):
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    mesh = mesh_from_tets(nodes, [[0, 1, 2, 3]])
    lam = np.array(bary) / np.sum(bary)
    point = lam @ nodes
    got = mesh.interpolate(np.array(values), point[None, :])[0]
    assert got == pytest.approx(lam @ np.array(values), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_stiffness_annihilates_constants(seed):
    rng = np.random.default_rng(seed)
    nodes = rng.uniform(size=(12, 3))
    from scipy.spatial import Delaunay

    tets = Delaunay(nodes).simplices
    mesh = mesh_from_tets(nodes, tets)
    k = mesh.stiffness(rng.uniform(0.5, 2.0, mesh.n_tets))
    assert np.max(np.abs(k @ np.ones(12))) < 1e-12 * abs(k).max()
    assert abs(k - k.T).max() < 1e-14 * abs(k).max()


def test_build_layout_rejects_electrode_without_faces(small_tank):
    mesh, _ = small_tank
    with pytest.raises(ValidationError):
        build_layout(mesh, [[0, 0, 0.015], [0.05, 0, 0.015]], 0.004)


def test_document_contains_electrode_faces(small_tank):
    mesh, layout = small_tank
    doc = mesh_document(mesh, layout)
    assert len(doc["electrodes"]) == layout.M
    assert doc["electrodes"][0]["faces"] == layout[0].faces.tolist()
