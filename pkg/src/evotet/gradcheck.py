"""Finite-difference spot checks for every hand-written backward pass.

Each check builds a randomized micro-instance, compares the analytic gradient
against central differences and reports the worst relative error.  The CLI
`gradcheck` subcommand runs these; the test suite runs larger sweeps.
"""

from __future__ import annotations

import numpy as np

from .constraints import loss_lightness
from .dmtet import grid_init, marching_tetrahedra, mt_backward
from .errors import ContractError
from .fieldgrid import FieldConfig, FieldParams, field_backward, field_eval, field_init
from .guidance import GuidanceConfig, reference_guidance
from .render import Camera, rasterize
from .sdfkit import TriMesh


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def check_fieldgrid(seed: int) -> float:
    cfg = FieldConfig(levels=2, base_resolution=2, growth_factor=2.0,
                      features_per_level=2, table_size=32, mlp_hidden=(6,), output_dim=1)
    p = field_init(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    p.values[:] = rng.normal(0, 0.4, p.values.shape)
    pts = rng.uniform(0.1, 0.9, (3, 3))
    pts = np.round(pts * 16) / 16 + 1.0 / 64  # keep away from cell faces
    gout = rng.normal(size=(3, 1))
    pg, _ = field_backward(p, pts, gout)
    h = 1e-5
    worst = 0.0
    for i in rng.choice(p.values.size, 12, replace=False):
        vp = p.values.copy(); vp[i] += h
        vm = p.values.copy(); vm[i] -= h
        fp = float(np.sum(field_eval(FieldParams(cfg, vp), pts) * gout))
        fm = float(np.sum(field_eval(FieldParams(cfg, vm), pts) * gout))
        fd = (fp - fm) / (2 * h)
        if abs(fd) > 1e-10 or abs(pg[i]) > 1e-10:
            worst = max(worst, _rel(pg[i], fd))
    return worst


def check_dmtet(seed: int) -> float:
    rng = np.random.default_rng(seed)
    g = grid_init(3)
    g.sdf = rng.uniform(0.3, 1.0, g.n_vertices) * rng.choice([-1.0, 1.0], g.n_vertices)
    g.offsets = np.zeros_like(g.vertices)
    mesh, prov = marching_tetrahedra(g)
    if mesh.is_empty():
        return 0.0
    gvec = rng.normal(size=(mesh.n_vertices, 3))
    sg, _ = mt_backward(prov, gvec)
    h = 1e-6
    worst = 0.0
    for i in rng.choice(g.n_vertices, 6, replace=False):
        gp = g.copy(); gp.sdf[i] += h
        gm = g.copy(); gm.sdf[i] -= h
        mp, _ = marching_tetrahedra(gp)
        mm, _ = marching_tetrahedra(gm)
        fd = float((np.sum(mp.vertices * gvec) - np.sum(mm.vertices * gvec)) / (2 * h))
        if abs(fd) > 1e-10 or abs(sg[i]) > 1e-10:
            worst = max(worst, _rel(sg[i], fd))
    return worst


def check_render(seed: int) -> float:
    rng = np.random.default_rng(seed)
    v = np.array([[-8.0, -8.0, 0.0], [8.0, -8.0, 0.0], [0.0, 8.0, 0.0]])
    mesh = TriMesh(v, np.array([[0, 1, 2]]))
    cam = Camera(fov_deg=45, position=(0, 0, 2.5), target=(0, 0, 0), width=16, height=16)
    attr = rng.normal(size=(3, 2))
    fb = rasterize(mesh, cam, attributes=attr)
    g_img = rng.normal(size=fb.channels["attr"].shape)
    g_attr = fb.scatter_to_attr(g_img)
    h = 1e-6
    worst = 0.0
    for i in range(3):
        for c in range(2):
            ap = attr.copy(); ap[i, c] += h
            am = attr.copy(); am[i, c] -= h
            fp = float(np.sum(rasterize(mesh, cam, attributes=ap).channels["attr"] * g_img))
            fm = float(np.sum(rasterize(mesh, cam, attributes=am).channels["attr"] * g_img))
            worst = max(worst, _rel(g_attr[i, c], (fp - fm) / (2 * h)))
    return worst


def check_constraints(seed: int) -> float:
    rng = np.random.default_rng(seed)
    kd = rng.uniform(0.1, 0.9, (8, 8, 3))
    ref = rng.uniform(0.1, 0.9, (8, 8, 3))
    _, g = loss_lightness(kd, ref, (2, 2))
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        i, j, c = rng.integers(0, 8), rng.integers(0, 8), rng.integers(0, 3)
        kp = kd.copy(); kp[i, j, c] += h
        km = kd.copy(); km[i, j, c] -= h
        fd = (loss_lightness(kp, ref, (2, 2))[0] - loss_lightness(km, ref, (2, 2))[0]) / (2 * h)
        if abs(fd) > 1e-12 or abs(g[i, j, c]) > 1e-12:
            worst = max(worst, _rel(g[i, j, c], fd))
    return worst


def check_guidance(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 6, 3))
    ref = rng.normal(size=(6, 6, 3))
    cfg = GuidanceConfig(strength=1.0, weighting="constant")
    s = reference_guidance(x, ref, cfg, seed)
    h = 1e-6
    worst = 0.0
    for _ in range(10):
        i, j, c = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 3)
        xp = x.copy(); xp[i, j, c] += h
        xm = x.copy(); xm[i, j, c] -= h
        dp = reference_guidance(xp, ref, cfg, seed).diagnostic
        dm = reference_guidance(xm, ref, cfg, seed).diagnostic
        worst = max(worst, _rel(s.gradient[i, j, c], (dp - dm) / (2 * h)))
    return worst


CHECKS = {
    "fieldgrid": (check_fieldgrid, 1e-4),
    "dmtet": (check_dmtet, 1e-4),
    "render": (check_render, 1e-5),
    "constraints": (check_constraints, 1e-3),
    "guidance": (check_guidance, 1e-5),
}


def run_gradcheck(module: str, seeds: int = 5) -> tuple[bool, list[str]]:
    if module not in CHECKS and module != "all":
        raise ContractError(f"unknown module {module!r}; choices: {sorted(CHECKS)} or all")
    names = sorted(CHECKS) if module == "all" else [module]
    lines = []
    all_ok = True
    for name in names:
        fn, tol = CHECKS[name]
        worst = max(fn(seed) for seed in range(seeds))
        ok = worst < tol
        all_ok &= ok
        lines.append(f"gradcheck {name}: {'PASS' if ok else 'FAIL'} "
                     f"(max rel err {worst:.2e}, tol {tol:.0e})")
    return all_ok, lines
