import numpy as np
import pytest

from evotet.dmtet import (
    OFFSET_ETA, TetGrid, evaluate_grid, evaluate_grid_backward, grid_init,
    marching_tetrahedra, mt_backward, subdivide_near_surface,
)
from evotet.errors import ContractError
from evotet.fieldgrid import FieldConfig, FieldParams, field_init
from evotet.sdfkit import MeshSdf, face_normals, sample_on_surface
from helpers import rel_err


def sphere_sdf(v, r=0.5):
    return np.linalg.norm(v, axis=1) - r


def with_sdf(grid, values):
    grid.sdf = np.asarray(values, dtype=np.float64)
    grid.offsets = np.zeros_like(grid.vertices)
    return grid


def test_grid_init_counts():
    g = grid_init(2)
    assert g.n_vertices == 8 and g.n_tets == 6
    g3 = grid_init(3)
    assert g3.n_vertices == 27 and g3.n_tets == 48


def test_grid_init_positive_volumes():
    for r in (2, 3, 5, 9):
        assert np.all(grid_init(r).signed_volumes() > 0)


def test_grid_init_rejects_degenerate_resolution():
    with pytest.raises(ContractError):
        grid_init(1)


def test_evaluate_grid_constant_positive_gives_empty_mesh():
    cfg = FieldConfig(levels=1, base_resolution=2, features_per_level=2,
                      table_size=16, mlp_hidden=(8,), output_dim=1)
    p = field_init(cfg, seed=0)
    p.values[:cfg.grid_param_count] = 0.0
    p.values[-1] = 0.7  # output bias -> constant field
    g = evaluate_grid(grid_init(8), p)
    assert np.allclose(g.sdf, g.sdf[0]) and g.sdf[0] > 0
    mesh, _ = marching_tetrahedra(g)
    assert mesh.is_empty()


def test_evaluate_grid_offsets_bounded():
    cfg = FieldConfig(levels=2, base_resolution=2, features_per_level=2,
                      table_size=64, mlp_hidden=(8,), output_dim=4)
    p = field_init(cfg, seed=1)
    p.values[:] = np.random.default_rng(1).normal(0, 2, p.values.shape)
    g = evaluate_grid(grid_init(6), p)
    assert np.max(np.abs(g.offsets)) <= OFFSET_ETA * g.cell_size


def test_evaluate_grid_fits_sphere_signs():
    # plain gradient descent is enough for a linear (no-hidden-layer) field
    cfg = FieldConfig(levels=2, base_resolution=4, features_per_level=2,
                      table_size=8192, mlp_hidden=(), output_dim=1)
    p = field_init(cfg, seed=2)
    g = grid_init(12)
    target = sphere_sdf(g.vertices)
    pts = (g.vertices + 1.0) * 0.5
    from evotet.fieldgrid import field_backward, field_eval
    for _ in range(400):
        out = field_eval(p, pts)[:, 0]
        grad, _ = field_backward(p, pts, (2 * (out - target) / len(target))[:, None])
        p.values -= 0.6 * grad
    evaluate_grid(g, p)
    inside = np.linalg.norm(g.vertices, axis=1) < 0.4
    outside = np.linalg.norm(g.vertices, axis=1) > 0.6
    assert np.all(g.sdf[inside] < 0) and np.all(g.sdf[outside] > 0)


def test_mt_requires_sdf_cache():
    with pytest.raises(ContractError):
        marching_tetrahedra(grid_init(3))


def test_mt_all_positive_empty():
    g = with_sdf(grid_init(4), np.ones(64))
    mesh, prov = marching_tetrahedra(g)
    assert mesh.is_empty() and prov.t.size == 0


def single_tet_grid():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return TetGrid(verts, np.array([[0, 1, 2, 3]]), resolution=2, cell_size=1.0)


@pytest.mark.parametrize("case", range(16))
def test_mt_all_sign_patterns_match_hand_oracle(case):
    signs = np.array([1.0 if case & (1 << k) else -1.0 for k in range(4)])
    vals = signs * np.array([0.4, 0.6, 0.5, 0.7])
    g = with_sdf(single_tet_grid(), vals)
    mesh, prov = marching_tetrahedra(g)

    npos = np.count_nonzero(signs > 0)
    if npos in (0, 4):
        assert mesh.is_empty()
        return
    expect_tris = 1 if npos in (1, 3) else 2
    assert mesh.n_faces == expect_tris

    # oracle: crossing edges and interpolated positions solved by hand
    expected = []
    for i, j in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]:
        if (vals[i] > 0) != (vals[j] > 0):
            t = vals[i] / (vals[i] - vals[j])
            expected.append((1 - t) * g.vertices[i] + t * g.vertices[j])
    expected = np.array(expected)
    assert mesh.n_vertices == len(expected)
    for v in mesh.vertices:
        assert np.min(np.linalg.norm(expected - v, axis=1)) < 1e-12

    # orientation: normals point toward the positive side
    pos_c = g.vertices[signs > 0].mean(axis=0)
    neg_c = g.vertices[signs < 0].mean(axis=0)
    fn = face_normals(mesh)
    assert np.all(fn @ (pos_c - neg_c) > 0)


def test_mt_sphere_watertight_euler_radius():
    g = grid_init(64)
    with_sdf(g, sphere_sdf(g.vertices))
    mesh, _ = marching_tetrahedra(g)
    assert mesh.is_watertight()
    n_edges = len(np.unique(mesh.edges(), axis=0))
    assert mesh.n_vertices - n_edges + mesh.n_faces == 2
    assert np.max(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)) < 1.5 * g.cell_size


def test_mt_zero_sdf_tiebreak_deterministic():
    vals = np.array([0.0, -0.5, 0.5, -0.5])  # exact zero treated as positive
    g = with_sdf(single_tet_grid(), vals)
    mesh, _ = marching_tetrahedra(g)
    assert mesh.n_faces == 2  # pattern (+,-,+,-)


def test_mt_invariant_to_tet_order():
    g = grid_init(8)
    with_sdf(g, sphere_sdf(g.vertices))
    m1, _ = marching_tetrahedra(g)
    g2 = g.copy()
    perm = np.random.default_rng(0).permutation(g2.n_tets)
    g2.tets = g2.tets[perm]
    m2, _ = marching_tetrahedra(g2)
    assert np.array_equal(m1.vertices, m2.vertices)
    f1 = {tuple(sorted(f)) for f in m1.faces.tolist()}
    f2 = {tuple(sorted(f)) for f in m2.faces.tolist()}
    assert f1 == f2


def test_mt_vertices_interpolate_to_zero():
    g = grid_init(10)
    with_sdf(g, sphere_sdf(g.vertices, 0.6))
    mesh, prov = marching_tetrahedra(g)
    interp = (1 - prov.t) * prov.s[:, 0] + prov.t * prov.s[:, 1]
    assert np.max(np.abs(interp)) < 1e-15
    assert np.all((prov.t >= 0) & (prov.t <= 1))
    assert np.all(prov.s[:, 0] * prov.s[:, 1] < 0)


def test_mt_backward_zero_gradients():
    g = grid_init(6)
    with_sdf(g, sphere_sdf(g.vertices))
    _, prov = marching_tetrahedra(g)
    sg, og = mt_backward(prov, np.zeros((prov.t.size, 3)))
    assert not sg.any() and not og.any()


def fd_loss(grid, gvec):
    mesh, _ = marching_tetrahedra(grid)
    return float(np.sum(mesh.vertices * gvec))


@pytest.mark.parametrize("seed", range(5))
def test_mt_backward_sdf_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = grid_init(3)
    vals = rng.uniform(0.3, 1.0, g.n_vertices) * rng.choice([-1.0, 1.0], g.n_vertices)
    with_sdf(g, vals)
    mesh, prov = marching_tetrahedra(g)
    gvec = rng.normal(size=(mesh.n_vertices, 3))
    sg, _ = mt_backward(prov, gvec)
    h = 1e-6
    for i in rng.choice(g.n_vertices, size=8, replace=False):
        gp = g.copy(); gp.sdf[i] += h
        gm = g.copy(); gm.sdf[i] -= h
        fd = (fd_loss(gp, gvec) - fd_loss(gm, gvec)) / (2 * h)
        assert rel_err(sg[i], fd) < 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_mt_backward_offsets_match_finite_differences(seed):
    rng = np.random.default_rng(10 + seed)
    g = grid_init(2)  # one cube = 6 tets
    vals = rng.uniform(0.3, 1.0, 8) * rng.choice([-1.0, 1.0], 8)
    with_sdf(g, vals)
    g.offsets = rng.uniform(-0.1, 0.1, size=(8, 3))
    mesh, prov = marching_tetrahedra(g)
    gvec = rng.normal(size=(mesh.n_vertices, 3))
    _, og = mt_backward(prov, gvec)
    h = 1e-6
    for i in range(8):
        for d in range(3):
            gp = g.copy(); gp.offsets[i, d] += h
            gm = g.copy(); gm.offsets[i, d] -= h
            fd = (fd_loss(gp, gvec) - fd_loss(gm, gvec)) / (2 * h)
            if abs(fd) > 1e-12 or abs(og[i, d]) > 1e-12:
                assert rel_err(og[i, d], fd) < 1e-5


def test_evaluate_grid_backward_matches_finite_differences():
    cfg = FieldConfig(levels=1, base_resolution=2, features_per_level=2,
                      table_size=64, mlp_hidden=(6,), output_dim=4)
    p = field_init(cfg, seed=3)
    p.values[:] = np.random.default_rng(3).normal(0, 0.3, p.values.shape)
    g = grid_init(3)
    rng = np.random.default_rng(4)
    sdf_g = rng.normal(size=g.n_vertices)
    off_g = rng.normal(size=(g.n_vertices, 3))
    tape = []
    evaluate_grid(g, p, tape_out=tape)
    pg = evaluate_grid_backward(g, p, sdf_g, off_g, tape=tape)

    def loss(v):
        q = FieldParams(cfg, v)
        gg = evaluate_grid(grid_init(3), q)
        return float(np.sum(gg.sdf * sdf_g) + np.sum(gg.offsets * off_g))

    rng2 = np.random.default_rng(5)
    idx = rng2.choice(p.values.size, size=25, replace=False)
    h = 1e-6
    for i in idx:
        vp = p.values.copy(); vp[i] += h
        vm = p.values.copy(); vm[i] -= h
        fd = (loss(vp) - loss(vm)) / (2 * h)
        if abs(fd) > 1e-10 or abs(pg[i]) > 1e-10:
            assert rel_err(pg[i], fd) < 1e-4


def test_subdivide_nothing_selected_is_identity():
    g = grid_init(4)
    with_sdf(g, np.full(g.n_vertices, 3.0))
    out = subdivide_near_surface(g)
    assert np.array_equal(out.tets, g.tets)
    assert np.array_equal(out.vertices, g.vertices)
    assert np.array_equal(out.sdf, g.sdf)


def test_subdivide_single_tet_becomes_eight():
    g = single_tet_grid()
    with_sdf(g, np.array([0.01, -0.01, 0.02, -0.02]))
    out = subdivide_near_surface(g)
    assert out.n_tets == g.n_tets + 7
    assert np.all(out.signed_volumes() > 0)
    assert out.cell_size == g.cell_size * 0.5


def test_subdivide_threshold_selects_by_abs_mean():
    g = grid_init(3)
    vals = np.full(g.n_vertices, -0.5)  # deep inside: |mean| = 0.5 > 0.2
    with_sdf(g, vals)
    assert subdivide_near_surface(g, threshold=0.2, use_abs=True).n_tets == g.n_tets
    # signed-mean mode would split everything at -0.1
    with_sdf(g, np.full(g.n_vertices, -0.1))
    out_signed = subdivide_near_surface(g, threshold=0.2, use_abs=False)
    assert out_signed.n_tets == g.n_tets * 8


def test_subdivide_sphere_hausdorff_and_signs():
    g = grid_init(32)
    with_sdf(g, sphere_sdf(g.vertices))
    before, _ = marching_tetrahedra(g)
    out = subdivide_near_surface(g)
    assert out.n_tets > g.n_tets
    with_sdf(out, sphere_sdf(out.vertices))
    # retained parent vertices keep their sign pattern
    assert np.array_equal(np.sign(out.sdf[:g.n_vertices]), np.sign(g.sdf))
    after, _ = marching_tetrahedra(out)

    rng = np.random.default_rng(0)
    pa = sample_on_surface(before, 4000, rng)
    pb = sample_on_surface(after, 4000, rng)
    da = MeshSdf(after, assume_watertight=True).unsigned(pa)[0]
    db = MeshSdf(before, assume_watertight=True).unsigned(pb)[0]
    assert max(da.max(), db.max()) < g.cell_size
