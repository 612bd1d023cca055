"""Hybrid tetrahedral-grid shape representation.

A regular grid over [-1,1]^3 is split into 6 tetrahedra per cube along a
consistent main diagonal.  Per-vertex SDF values and bounded deformation
offsets come from a field; marching tetrahedra extracts a triangle mesh whose
vertices remember the grid edge and interpolation weight they came from, so
mesh-vertex gradients chain back onto SDF values and offsets exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .fieldgrid import FieldParams, field_backward, field_eval_with_tape
from .sdfkit import TriMesh

OFFSET_ETA = 0.45
ZERO_NUDGE = 1e-10
BOUNDARY_SDF_MIN = 1e-3   # outer-shell clamp keeping extracted surfaces closed

# 6-tet split of the unit cube along the (0,0,0)-(1,1,1) diagonal; corner bit
# order is x=bit0, y=bit1, z=bit2.  All 6 have positive orientation.
_CUBE_TETS = np.array([
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
], dtype=np.int64)

# Tet edges in canonical order; edge e connects corners _TET_EDGES[e].
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)

# Standard 16-case marching-tetrahedra table: case bit k is set when corner k
# is positive; entries index into _TET_EDGES, -1 padding.
_TRI_TABLE = np.array([
    [-1, -1, -1, -1, -1, -1],
    [1, 0, 2, -1, -1, -1],
    [4, 0, 3, -1, -1, -1],
    [1, 4, 2, 1, 3, 4],
    [3, 1, 5, -1, -1, -1],
    [2, 3, 0, 2, 5, 3],
    [1, 4, 0, 1, 5, 4],
    [4, 2, 5, -1, -1, -1],
    [4, 5, 2, -1, -1, -1],
    [4, 1, 0, 4, 5, 1],
    [3, 2, 0, 3, 5, 2],
    [1, 3, 5, -1, -1, -1],
    [4, 1, 2, 4, 3, 1],
    [3, 0, 4, -1, -1, -1],
    [2, 0, 1, -1, -1, -1],
    [-1, -1, -1, -1, -1, -1],
], dtype=np.int64)

_NUM_TRIS = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0], dtype=np.int64)


@dataclass
class TetGrid:
    vertices: np.ndarray          # (V,3) base positions in [-1,1]^3
    tets: np.ndarray              # (T,4) int64, positive orientation
    resolution: int               # vertices per axis of the generating grid
    cell_size: float              # edge length of the current cube cells
    sdf: np.ndarray | None = None       # (V,) cached field values
    offsets: np.ndarray | None = None   # (V,3) bounded deformations
    close_boundary: bool = False        # clamp the outer shell positive

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def deformed(self) -> np.ndarray:
        if self.offsets is None:
            return self.vertices
        return self.vertices + self.offsets

    def signed_volumes(self) -> np.ndarray:
        v = self.vertices
        t = self.tets
        a = v[t[:, 1]] - v[t[:, 0]]
        b = v[t[:, 2]] - v[t[:, 0]]
        c = v[t[:, 3]] - v[t[:, 0]]
        return np.einsum("ij,ij->i", a, np.cross(b, c)) / 6.0

    def copy(self) -> "TetGrid":
        return TetGrid(self.vertices.copy(), self.tets.copy(), self.resolution,
                       self.cell_size,
                       None if self.sdf is None else self.sdf.copy(),
                       None if self.offsets is None else self.offsets.copy(),
                       close_boundary=self.close_boundary)

    def boundary_vertices(self) -> np.ndarray:
        return np.any(np.abs(self.vertices) >= 1.0 - 1e-12, axis=1)


def grid_init(resolution: int) -> TetGrid:
    """Regular tet grid over [-1,1]^3: `resolution` vertices per axis, 6 tets per cube."""
    if resolution < 2:
        raise ContractError(f"resolution must be >= 2, got {resolution}")
    r = resolution
    axis = np.linspace(-1.0, 1.0, r)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    verts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def vid(ix, iy, iz):
        return ix + r * (iy + r * iz)

    n = r - 1
    cz, cy, cx = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    cx, cy, cz = cx.ravel(), cy.ravel(), cz.ravel()
    corner = np.empty((cx.size, 8), dtype=np.int64)
    for c in range(8):
        corner[:, c] = vid(cx + (c & 1), cy + ((c >> 1) & 1), cz + ((c >> 2) & 1))
    tets = corner[:, _CUBE_TETS].reshape(-1, 4)
    return TetGrid(verts, tets, resolution=r, cell_size=2.0 / n)


def evaluate_grid(grid: TetGrid, params: FieldParams, tape_out: list | None = None) -> TetGrid:
    """Fill the grid's SDF cache and offsets from a field.

    Field output dim 0 is the SDF; dims 1..3 (when output_dim >= 4) become
    tanh-squashed offsets bounded by OFFSET_ETA * cell_size per axis.
    """
    pts = (grid.vertices + 1.0) * 0.5
    out, tape = field_eval_with_tape(params, pts)
    if not np.all(np.isfinite(out)):
        raise NumericError("field produced NaN/Inf on grid vertices")
    grid.sdf = out[:, 0].copy()
    if grid.close_boundary:
        clamped = grid.boundary_vertices() & (grid.sdf < BOUNDARY_SDF_MIN)
        grid.sdf[clamped] = BOUNDARY_SDF_MIN
    if params.config.output_dim >= 4:
        grid.offsets = OFFSET_ETA * grid.cell_size * np.tanh(out[:, 1:4])
    else:
        grid.offsets = np.zeros_like(grid.vertices)
    if tape_out is not None:
        tape_out.clear()
        tape_out.extend([tape, out])
    return grid


def evaluate_grid_backward(grid: TetGrid, params: FieldParams,
                           sdf_grad: np.ndarray, offset_grad: np.ndarray,
                           tape=None) -> np.ndarray:
    """Chain grid-level gradients back to flat field-parameter gradients."""
    pts = (grid.vertices + 1.0) * 0.5
    if tape is None:
        out, ftape = field_eval_with_tape(params, pts)
    else:
        ftape, out = tape
    gout = np.zeros((grid.n_vertices, params.config.output_dim))
    gout[:, 0] = sdf_grad
    if grid.close_boundary:
        clamped = grid.boundary_vertices() & (out[:, 0] < BOUNDARY_SDF_MIN)
        gout[clamped, 0] = 0.0
    if params.config.output_dim >= 4:
        th = np.tanh(out[:, 1:4])
        gout[:, 1:4] = offset_grad * OFFSET_ETA * grid.cell_size * (1.0 - th ** 2)
    pgrad, _ = field_backward(params, pts, gout, tape=ftape)
    return pgrad


@dataclass
class MtProvenance:
    """Where each extracted mesh vertex came from: grid edge (i,j) and weight t.

    t = s_i / (s_i - s_j) with s the (zero-nudged) SDF values, so the mesh
    vertex is (1-t) * p_i + t * p_j on the deformed grid.
    """
    edge: np.ndarray      # (K,2) grid vertex ids, canonical i<j order
    t: np.ndarray         # (K,)
    s: np.ndarray         # (K,2) nudged sdf values at (i,j)
    p: np.ndarray         # (K,2,3) deformed positions at (i,j)
    n_grid_vertices: int


def _nudged(sdf: np.ndarray) -> np.ndarray:
    return np.where(sdf == 0.0, ZERO_NUDGE, sdf)


def marching_tetrahedra(grid: TetGrid) -> tuple[TriMesh, MtProvenance]:
    """Extract the zero isosurface; shared crossing edges become shared mesh
    vertices, so the mesh is watertight whenever the sign field is."""
    if grid.sdf is None:
        raise ContractError("grid SDF cache not filled; call evaluate_grid first")
    sdf = _nudged(np.asarray(grid.sdf, dtype=np.float64))
    pos = grid.deformed()
    occ = sdf > 0.0
    occ_t = occ[grid.tets]
    occ_sum = occ_t.sum(axis=1)
    valid = (occ_sum > 0) & (occ_sum < 4)
    tets = grid.tets[valid]
    empty_prov = MtProvenance(np.zeros((0, 2), dtype=np.int64), np.zeros(0),
                              np.zeros((0, 2)), np.zeros((0, 2, 3)), grid.n_vertices)
    if tets.shape[0] == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), empty_prov

    all_edges = tets[:, _TET_EDGES.ravel()].reshape(-1, 2)
    all_edges = np.sort(all_edges, axis=1)
    uniq, idx_map = np.unique(all_edges, axis=0, return_inverse=True)
    crossing = occ[uniq[:, 0]] != occ[uniq[:, 1]]
    vert_of_edge = np.full(uniq.shape[0], -1, dtype=np.int64)
    vert_of_edge[crossing] = np.arange(np.count_nonzero(crossing))

    ce = uniq[crossing]
    s_i = sdf[ce[:, 0]]
    s_j = sdf[ce[:, 1]]
    denom = s_i - s_j  # opposite signs, so |denom| >= |s_i|, never ~0
    t = s_i / denom
    verts = (1.0 - t)[:, None] * pos[ce[:, 0]] + t[:, None] * pos[ce[:, 1]]

    case = (occ_t[valid] * (1 << np.arange(4))).sum(axis=1)
    edge_vert = vert_of_edge[idx_map].reshape(-1, 6)  # per valid tet: mesh vert per edge
    faces = []
    for ntri, cols in ((1, slice(0, 3)), (2, slice(0, 6))):
        rows = _NUM_TRIS[case] == ntri
        if rows.any():
            tri = _TRI_TABLE[case[rows], cols]
            faces.append(np.take_along_axis(edge_vert[rows], tri, axis=1).reshape(-1, 3))
    mesh = TriMesh(verts, np.concatenate(faces) if faces else np.zeros((0, 3), dtype=np.int64))
    prov = MtProvenance(edge=ce, t=t, s=np.stack([s_i, s_j], axis=1),
                        p=np.stack([pos[ce[:, 0]], pos[ce[:, 1]]], axis=1),
                        n_grid_vertices=grid.n_vertices)
    return mesh, prov


def mt_backward(prov: MtProvenance, mesh_vertex_gradients: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of mesh vertices w.r.t. per-vertex SDF values and offsets.

    v = (1-t) p_i + t p_j, t = s_i / (s_i - s_j):
      dv/ds_i = (p_j - p_i) * (-s_j) / (s_i - s_j)^2
      dv/ds_j = (p_j - p_i) * ( s_i) / (s_i - s_j)^2
    """
    g = np.asarray(mesh_vertex_gradients, dtype=np.float64).reshape(-1, 3)
    if g.shape[0] != prov.t.shape[0]:
        raise ContractError("gradient count does not match provenance")
    sdf_grad = np.zeros(prov.n_grid_vertices)
    off_grad = np.zeros((prov.n_grid_vertices, 3))
    if g.shape[0] == 0:
        return sdf_grad, off_grad
    dp = prov.p[:, 1] - prov.p[:, 0]
    denom = prov.s[:, 0] - prov.s[:, 1]
    small = np.abs(denom) < 1e-12
    if small.any():
        warnings.warn("clamped near-zero SDF difference in mt_backward",
                      RuntimeWarning, stacklevel=2)
        denom = np.where(small, np.where(denom >= 0, 1e-12, -1e-12), denom)
    gdp = np.einsum("ij,ij->i", g, dp)
    np.add.at(sdf_grad, prov.edge[:, 0], gdp * (-prov.s[:, 1]) / denom ** 2)
    np.add.at(sdf_grad, prov.edge[:, 1], gdp * prov.s[:, 0] / denom ** 2)
    np.add.at(off_grad, prov.edge[:, 0], (1.0 - prov.t)[:, None] * g)
    np.add.at(off_grad, prov.edge[:, 1], prov.t[:, None] * g)
    return sdf_grad, off_grad


def subdivide_near_surface(grid: TetGrid, threshold: float = 0.2,
                           use_abs: bool = True) -> TetGrid:
    """Split every tet whose mean (absolute by default) vertex SDF is below
    `threshold` into 8 children via shared edge midpoints (1:8 subdivision).

    Unselected tets are kept; midpoints hanging on their faces are recorded on
    the result as `hanging_vertices` and the SDF cache is dropped so the field
    re-evaluates every vertex.
    """
    if grid.sdf is None:
        raise ContractError("grid SDF cache not filled; call evaluate_grid first")
    vals = np.abs(grid.sdf) if use_abs else grid.sdf
    sel = vals[grid.tets].mean(axis=1) < threshold
    if not sel.any():
        return grid.copy()

    selected = grid.tets[sel]
    kept = grid.tets[~sel]
    edges = selected[:, _TET_EDGES.ravel()].reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    mid_id = grid.n_vertices + np.arange(uniq.shape[0])
    midpoints = 0.5 * (grid.vertices[uniq[:, 0]] + grid.vertices[uniq[:, 1]])
    new_verts = np.vstack([grid.vertices, midpoints])

    m = mid_id[inv].reshape(-1, 6)  # midpoint vertex id per tet edge
    a, b, c, d = (selected[:, k] for k in range(4))
    mab, mac, mad, mbc, mbd, mcd = (m[:, k] for k in range(6))
    children = np.concatenate([
        np.stack([a, mab, mac, mad], axis=1),
        np.stack([mab, b, mbc, mbd], axis=1),
        np.stack([mac, mbc, c, mcd], axis=1),
        np.stack([mad, mbd, mcd, d], axis=1),
        # central octahedron split along the (mab, mcd) diagonal
        np.stack([mab, mcd, mac, mad], axis=1),
        np.stack([mab, mcd, mad, mbd], axis=1),
        np.stack([mab, mcd, mbd, mbc], axis=1),
        np.stack([mab, mcd, mbc, mac], axis=1),
    ])
    out = TetGrid(new_verts, np.vstack([kept, children]), grid.resolution,
                  grid.cell_size * 0.5, close_boundary=grid.close_boundary)
    vol = out.signed_volumes()
    flip = vol < 0
    out.tets[flip] = out.tets[flip][:, [0, 1, 3, 2]]
    if np.any(out.signed_volumes() <= 0):
        raise NumericError("degenerate tet produced by subdivision")
    out.hanging_vertices = mid_id  # set of vertices absent from the parent grid
    return out
