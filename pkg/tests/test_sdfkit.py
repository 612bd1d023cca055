import numpy as np
import pytest

from evotet.errors import ContractError
from evotet.sdfkit import (
    Box, Capsule, Ellipsoid, MeshSdf, PointSampleSet, Sphere, TriMesh, Union,
    analytic_sdf, extract_part, face_areas, fit_to_unit_cube, load_obj,
    make_box_mesh, make_icosphere, mesh_to_sdf, mesh_to_sdf_brute,
    sample_constraint_points, save_obj, winding_number,
)


def test_sphere_sdf():
    s = Sphere((0, 0, 0), 0.5)
    assert analytic_sdf(s, np.array([[1.0, 0, 0]]))[0] == pytest.approx(0.5)
    assert analytic_sdf(s, np.array([[0.0, 0, 0]]))[0] == pytest.approx(-0.5)


def test_capsule_sdf_on_axis():
    c = Capsule((0, -0.5, 0), (0, 0.5, 0), 0.2)
    assert c.query(np.array([[0.0, 0, 0]]))[0] == pytest.approx(-0.2)
    assert c.query(np.array([[0.0, 0.9, 0]]))[0] == pytest.approx(0.2)


def test_box_sdf():
    b = Box((0, 0, 0), (0.5, 0.5, 0.5))
    assert b.query(np.array([[1.0, 0, 0]]))[0] == pytest.approx(0.5)
    assert b.query(np.array([[0, 0, 0]]))[0] == pytest.approx(-0.5)
    # corner distance
    assert b.query(np.array([[1.0, 1.0, 1.0]]))[0] == pytest.approx(np.sqrt(3) * 0.5)


def test_ellipsoid_matches_sphere_when_isotropic():
    e = Ellipsoid((0, 0, 0), (0.4, 0.4, 0.4))
    s = Sphere((0, 0, 0), 0.4)
    pts = np.random.default_rng(0).uniform(-1, 1, size=(100, 3))
    assert np.allclose(e.query(pts), s.query(pts), atol=1e-9)


def test_ellipsoid_distance_vs_dense_sampling():
    e = Ellipsoid((0, 0, 0), (0.6, 0.3, 0.2))
    # oracle: min distance to densely sampled ellipsoid surface
    rng = np.random.default_rng(1)
    u = rng.normal(size=(200000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    surf = u * np.array([0.6, 0.3, 0.2])
    pts = rng.uniform(-1, 1, size=(30, 3))
    d = e.query(pts)
    for p, dv in zip(pts, d):
        ref = np.min(np.linalg.norm(surf - p, axis=1))
        assert abs(abs(dv) - ref) < 2e-3
        inside = np.sum((p / np.array([0.6, 0.3, 0.2])) ** 2) < 1
        assert (dv < 0) == inside


def test_union_is_minimum():
    a = Sphere((0.4, 0, 0), 0.3)
    b = Box((-0.4, 0, 0), (0.2, 0.2, 0.2))
    u = Union([a, b])
    pts = np.random.default_rng(2).uniform(-1, 1, size=(50, 3))
    assert np.allclose(u.query(pts), np.minimum(a.query(pts), b.query(pts)))


def test_mesh_to_sdf_unit_cube_face_distance():
    cube = make_box_mesh(center=(0.5, 0.5, 0.5), half_extents=(0.5, 0.5, 0.5))
    d = mesh_to_sdf(cube, np.array([[2.0, 0.0, 0.0]]))
    # nearest point is the cube corner (1, 0, 0)
    assert d[0] == pytest.approx(1.0, abs=1e-12)
    d2 = mesh_to_sdf(cube, np.array([[2.0, 0.5, 0.5]]))
    assert d2[0] == pytest.approx(1.0, abs=1e-12)


def test_mesh_to_sdf_zero_on_vertex():
    m = make_icosphere(1.0, 1)
    d = mesh_to_sdf(m, m.vertices[[3, 17]])
    assert np.all(np.abs(d) < 1e-9)


def test_mesh_to_sdf_matches_brute_force():
    m = make_icosphere(0.7, 2)  # 320 faces
    pts = np.random.default_rng(3).uniform(-1, 1, size=(1000, 3))
    fast = mesh_to_sdf(m, pts)
    brute = mesh_to_sdf_brute(m, pts)
    assert np.max(np.abs(fast - brute)) < 1e-6


def test_winding_sign_matches_ray_parity():
    m = make_icosphere(0.6, 2)
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, size=(300, 3))
    w_inside = winding_number(m, pts) > 0.5
    # parity oracle: count crossings along +x using Moller-Trumbore
    a, b, c = m.triangle_corners()
    e1, e2 = b - a, c - a
    d = np.array([1.0, 0.0, 0.0])
    for p, wi in zip(pts, w_inside):
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-12
        tvec = p - a
        u = np.einsum("ij,ij->i", tvec, pvec) / np.where(ok, det, 1.0)
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,j->i", qvec, d) / np.where(ok, det, 1.0)
        t = np.einsum("ij,ij->i", e2, qvec) / np.where(ok, det, 1.0)
        hits = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        assert (np.count_nonzero(hits) % 2 == 1) == wi


def test_non_watertight_mesh_warns_and_signs_by_pseudonormal():
    m = make_icosphere(0.5, 1)
    holed = TriMesh(m.vertices, m.faces[:-1])  # drop one face
    with pytest.warns(RuntimeWarning):
        src = MeshSdf(holed)
    d = src.query(np.array([[0.0, 0.0, 0.0], [0.9, 0.0, 0.0]]))
    assert d[0] < 0 < d[1]


def test_sample_constraint_points_ranges_and_determinism():
    m = make_icosphere(0.5, 1)
    s = sample_constraint_points(m, 0, 100, seed=5)
    assert s.points.shape == (100, 3)
    assert np.all((s.points >= -1) & (s.points <= 1))
    t = sample_constraint_points(m, 0, 100, seed=5)
    assert np.array_equal(s.points, t.points)


def test_sample_on_surface_radius():
    m = make_icosphere(1.0, 3)
    s = sample_constraint_points(m, 1000, 0, jitter_sigma=0.0, seed=6)
    r = np.linalg.norm(s.points, axis=1)
    # chord sag of the subdivided icosphere bounds the radial deviation
    assert np.all(np.abs(r - 1.0) < 0.01)


def test_sample_jitter_statistics():
    m = make_icosphere(1.0, 3)
    s = sample_constraint_points(m, 10000, 0, jitter_sigma=0.05, seed=7)
    r = np.linalg.norm(s.points, axis=1)
    # |p| - 1 ~ projection of isotropic jitter onto the normal, std ~ sigma
    assert abs(np.std(r - 1.0) - 0.05) < 0.01


def test_empty_mesh_sampling_rejected():
    empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ContractError):
        sample_constraint_points(empty, 10, 0)


def test_extract_part_identity_and_partition():
    m = make_icosphere(0.5, 1)
    m.part_labels = np.zeros(m.n_vertices, dtype=np.int64)
    sub = extract_part(m, 0)
    assert sub.n_faces == m.n_faces and sub.n_vertices == m.n_vertices

    a = make_icosphere(0.3, 1, center=(-0.5, 0, 0))
    b = make_icosphere(0.3, 1, center=(0.5, 0, 0))
    two = TriMesh(np.vstack([a.vertices, b.vertices]),
                  np.vstack([a.faces, b.faces + a.n_vertices]),
                  part_labels=np.concatenate([np.zeros(a.n_vertices, dtype=np.int64),
                                              np.ones(b.n_vertices, dtype=np.int64)]))
    second = extract_part(two, 1)
    assert second.n_faces == b.n_faces
    # per-face label scan oracle + partition property
    counts = [np.count_nonzero(np.all(two.part_labels[two.faces] == lab, axis=1))
              for lab in (0, 1)]
    assert counts[1] == second.n_faces
    assert sum(counts) == two.n_faces


def test_extract_part_absent_label_warns_empty():
    m = make_icosphere(0.5, 1)
    m.part_labels = np.zeros(m.n_vertices, dtype=np.int64)
    with pytest.warns(RuntimeWarning):
        sub = extract_part(m, 42)
    assert sub.is_empty()


def test_extract_part_requires_labels():
    m = make_icosphere(0.5, 1)
    with pytest.raises(ContractError):
        extract_part(m, 0)


def test_watertight_and_areas():
    m = make_icosphere(1.0, 2)
    assert m.is_watertight()
    assert np.all(face_areas(m) > 0)
    holed = TriMesh(m.vertices, m.faces[:-1])
    assert not holed.is_watertight()


def test_fit_to_unit_cube():
    m = make_icosphere(3.0, 1, center=(5, 5, 5))
    f = fit_to_unit_cube(m, margin=0.1)
    assert np.max(np.abs(f.vertices)) <= 0.9 + 1e-12


def test_obj_roundtrip(tmp_path):
    m = make_icosphere(0.5, 1)
    m.part_labels = (np.arange(m.n_vertices) % 3).astype(np.int64)
    p = tmp_path / "m.obj"
    save_obj(p, m)
    r = load_obj(p)
    assert r.n_vertices == m.n_vertices and r.n_faces == m.n_faces
    assert np.allclose(r.vertices, m.vertices, atol=1e-6)
    assert np.array_equal(r.faces, m.faces)
    assert np.array_equal(r.part_labels, m.part_labels)


def test_point_sample_set_rejects_empty_and_nan():
    with pytest.raises(ContractError):
        PointSampleSet(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ContractError):
        PointSampleSet(np.array([[np.nan, 0, 0]]), np.array([0]))
