"""Software rasterizer with attribute-gradient provenance plus PBR shading.

Hard z-buffered rasterization with perspective-correct attribute
interpolation; geometric position gradients flow only through vertex-normal
recomputation and a thin soft silhouette band, which is what the optimization
needs and keeps every other pixel's coverage constant under differentiation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .sdfkit import TriMesh, compute_vertex_normals, face_normals

SILHOUETTE_BAND_PX = 1.5
SILHOUETTE_STEEPNESS = 2.0   # logistic slope per pixel
_NEAR = 0.01
_FAR = 20.0
_PIX_BUDGET = 2_000_000


@dataclass(frozen=True)
class Camera:
    fov_deg: float
    position: tuple[float, float, float]
    target: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not (1.0 < self.fov_deg < 179.0):
            raise ContractError(f"fov {self.fov_deg} out of (1, 179)")
        f = np.asarray(self.target, dtype=np.float64) - np.asarray(self.position)
        if np.linalg.norm(f) < 1e-12:
            raise ContractError("camera position equals target")
        if np.linalg.norm(np.cross(f, np.asarray(self.up, dtype=np.float64))) < 1e-12:
            raise ContractError("camera up is parallel to the view direction")

    def basis(self):
        """Right-handed camera basis (right, up, forward-to-target)."""
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.target, dtype=np.float64) - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def world_to_clip(self) -> np.ndarray:
        """4x4 matrix mapping world homogeneous points to clip space."""
        right, up, fwd = self.basis()
        pos = np.asarray(self.position, dtype=np.float64)
        view = np.eye(4)
        view[0, :3] = right
        view[1, :3] = up
        view[2, :3] = -fwd
        view[:3, 3] = -view[:3, :3] @ pos
        t = 1.0 / np.tan(np.radians(self.fov_deg) / 2.0)
        aspect = self.width / self.height
        proj = np.zeros((4, 4))
        proj[0, 0] = t / aspect
        proj[1, 1] = t
        proj[2, 2] = (_FAR + _NEAR) / (_NEAR - _FAR)
        proj[2, 3] = 2 * _FAR * _NEAR / (_NEAR - _FAR)
        proj[3, 2] = -1.0
        return proj @ view


def project_vertices(mesh_vertices: np.ndarray, camera: Camera):
    """Screen-space pixel coordinates, clip w, and ndc depth for each vertex."""
    m = camera.world_to_clip()
    v = np.asarray(mesh_vertices, dtype=np.float64)
    clip = v @ m[:3, :3].T + m[:3, 3]
    w = v @ m[3, :3] + m[3, 3]
    safe_w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    ndc = clip / safe_w[:, None]
    sx = (ndc[:, 0] + 1.0) * 0.5 * camera.width
    sy = (1.0 - ndc[:, 1]) * 0.5 * camera.height
    return np.stack([sx, sy], axis=1), w, ndc[:, 2]


def screen_jacobian(mesh_vertices: np.ndarray, camera: Camera):
    """d(screen xy)/d(world vertex) per vertex, shape (N, 2, 3)."""
    m = camera.world_to_clip()
    v = np.asarray(mesh_vertices, dtype=np.float64)
    x = v @ m[0, :3] + m[0, 3]
    y = v @ m[1, :3] + m[1, 3]
    w = v @ m[3, :3] + m[3, 3]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    jx = (m[0, :3][None] * w[:, None] - x[:, None] * m[3, :3][None]) / (w ** 2)[:, None]
    jy = (m[1, :3][None] * w[:, None] - y[:, None] * m[3, :3][None]) / (w ** 2)[:, None]
    out = np.empty((v.shape[0], 2, 3))
    out[:, 0] = jx * 0.5 * camera.width
    out[:, 1] = -jy * 0.5 * camera.height
    return out


@dataclass
class FrameBuffer:
    """Per-pixel rasterization result plus whatever channels were shaded into it."""
    camera: Camera
    face_id: np.ndarray            # (H,W) int64, -1 = background
    bary: np.ndarray               # (H,W,3) perspective-correct, 0 on background
    depth: np.ndarray              # (H,W) ndc depth, +inf on background
    mesh: TriMesh
    screen: np.ndarray | None = None   # (N,2) projected vertices
    clip_w: np.ndarray | None = None   # (N,) clip-space w per vertex
    channels: dict = field(default_factory=dict)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    def interpolate(self, vertex_attr: np.ndarray) -> np.ndarray:
        """(H,W,C) image of perspective-correct interpolated vertex attributes."""
        attr = np.asarray(vertex_attr, dtype=np.float64)
        if attr.ndim == 1:
            attr = attr[:, None]
        if attr.shape[0] != self.mesh.n_vertices:
            raise ContractError("attribute count does not match vertex count")
        h, w = self.face_id.shape
        out = np.zeros((h, w, attr.shape[1]))
        cov = self.covered
        f = self.mesh.faces[self.face_id[cov]]
        b = self.bary[cov]
        out[cov] = (b[:, :, None] * attr[f]).sum(axis=1)
        return out

    def scatter_to_attr(self, grad_image: np.ndarray, n_channels: int | None = None) -> np.ndarray:
        """Adjoint of `interpolate`: pixel gradients back to vertex attributes."""
        g = np.asarray(grad_image, dtype=np.float64)
        if g.ndim == 2:
            g = g[:, :, None]
        cov = self.covered
        c = n_channels or g.shape[2]
        out = np.zeros((self.mesh.n_vertices, c))
        f = self.mesh.faces[self.face_id[cov]]
        b = self.bary[cov]
        gk = g[cov]
        for k in range(3):
            np.add.at(out, f[:, k], b[:, k][:, None] * gk)
        return out

    def position_grad_from_interp(self, vertex_attr: np.ndarray,
                                  grad_image: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. vertex positions through the perspective-correct
        interpolation weights (the smooth part; coverage itself is frozen)."""
        attr = np.asarray(vertex_attr, dtype=np.float64)
        if attr.ndim == 1:
            attr = attr[:, None]
        g = np.asarray(grad_image, dtype=np.float64)
        if g.ndim == 2:
            g = g[:, :, None]
        cov = self.covered
        if not cov.any():
            return np.zeros_like(self.mesh.vertices)
        rows, cols = np.nonzero(cov)
        f = self.mesh.faces[self.face_id[cov]]        # (K,3)
        s = self.screen[f]                            # (K,3,2)
        w = self.clip_w[f]                            # (K,3)
        px = cols + 0.5
        py = rows + 0.5
        e = np.empty((px.size, 3))
        for i, (b_, c_) in enumerate([(1, 2), (2, 0), (0, 1)]):
            e[:, i] = ((s[:, c_, 0] - s[:, b_, 0]) * (py - s[:, b_, 1])
                       - (s[:, c_, 1] - s[:, b_, 1]) * (px - s[:, b_, 0]))
        area = e.sum(axis=1)
        bs = e / area[:, None]
        gi = np.einsum("kc,kic->ki", g[cov], attr[f])  # dL/dbp_i
        d = (bs / w).sum(axis=1)
        ssum = (gi * bs / w).sum(axis=1)
        g_bs = gi / (w * d[:, None]) - (ssum / d ** 2)[:, None] / w
        g_w = bs / w ** 2 * ((ssum / d ** 2)[:, None] - gi / d[:, None])
        g_e = (g_bs - (g_bs * bs).sum(axis=1, keepdims=True)) / area[:, None]

        g_screen = np.zeros((self.mesh.n_vertices, 2))
        for i, (b_, c_) in enumerate([(1, 2), (2, 0), (0, 1)]):
            db = np.stack([s[:, c_, 1] - py, px - s[:, c_, 0]], axis=1)
            dc = np.stack([py - s[:, b_, 1], s[:, b_, 0] - px], axis=1)
            np.add.at(g_screen, f[:, b_], g_e[:, i][:, None] * db)
            np.add.at(g_screen, f[:, c_], g_e[:, i][:, None] * dc)
        jac = screen_jacobian(self.mesh.vertices, self.camera)
        g_pos = np.einsum("nk,nkj->nj", g_screen, jac)

        g_w_vert = np.zeros(self.mesh.n_vertices)
        for k in range(3):
            np.add.at(g_w_vert, f[:, k], g_w[:, k])
        m3 = self.camera.world_to_clip()[3, :3]
        g_pos += g_w_vert[:, None] * m3[None]
        return g_pos


def rasterize(mesh: TriMesh, camera: Camera, attributes: np.ndarray | None = None) -> FrameBuffer:
    """Hard z-buffered perspective rasterization at pixel centers.

    Depth ties resolve to the smaller face id, so output is deterministic.
    Faces crossing the near plane are skipped rather than clipped.
    """
    h, w = camera.height, camera.width
    fb = FrameBuffer(camera=camera,
                     face_id=np.full((h, w), -1, dtype=np.int64),
                     bary=np.zeros((h, w, 3)),
                     depth=np.full((h, w), np.inf),
                     mesh=mesh)
    if mesh.is_empty():
        if attributes is not None:
            fb.channels["attr"] = np.zeros((h, w, np.atleast_2d(attributes).shape[-1]))
        return fb

    screen, clip_w, ndc_z = project_vertices(mesh.vertices, camera)
    fb.screen = screen
    fb.clip_w = clip_w
    tri_s = screen[mesh.faces]          # (M,3,2)
    tri_w = clip_w[mesh.faces]          # (M,3)
    tri_z = ndc_z[mesh.faces]

    ok = np.all(tri_w > _NEAR * 0.5, axis=1)
    x0 = np.clip(np.floor(tri_s[:, :, 0].min(axis=1) - 0.5), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(tri_s[:, :, 0].max(axis=1) + 0.5), 0, w).astype(np.int64)
    y0 = np.clip(np.floor(tri_s[:, :, 1].min(axis=1) - 0.5), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(tri_s[:, :, 1].max(axis=1) + 0.5), 0, h).astype(np.int64)
    bw = x1 - x0
    bh = y1 - y0
    ok &= (bw > 0) & (bh > 0)
    area2 = ((tri_s[:, 1, 0] - tri_s[:, 0, 0]) * (tri_s[:, 2, 1] - tri_s[:, 0, 1])
             - (tri_s[:, 2, 0] - tri_s[:, 0, 0]) * (tri_s[:, 1, 1] - tri_s[:, 0, 1]))
    ok &= np.abs(area2) > 1e-14

    fids = np.nonzero(ok)[0]
    if fids.size == 0:
        if attributes is not None:
            fb.channels["attr"] = np.zeros((h, w, np.atleast_2d(attributes).shape[-1]))
        return fb
    order = fids[np.argsort((bw * bh)[fids], kind="stable")]
    zkey = np.full(h * w, np.iinfo(np.uint64).max, dtype=np.uint64)

    pos = 0
    while pos < order.size:
        # grow the chunk while the padded pixel block stays within budget
        take = 1
        max_area = bw[order[pos]] * bh[order[pos]]
        while (pos + take < order.size
               and (take + 1) * max(max_area, bw[order[pos + take]] * bh[order[pos + take]])
               <= _PIX_BUDGET):
            max_area = max(max_area, bw[order[pos + take]] * bh[order[pos + take]])
            take += 1
        chunk = order[pos:pos + take]
        pos += take

        cbw = int(bw[chunk].max())
        cbh = int(bh[chunk].max())
        px = x0[chunk][:, None, None] + np.arange(cbw)[None, None, :] + 0.5
        py = y0[chunk][:, None, None] + np.arange(cbh)[None, :, None] + 0.5
        valid = ((px <= x1[chunk][:, None, None] - 0.5 + 1e-9)
                 & (py <= y1[chunk][:, None, None] - 0.5 + 1e-9))
        a = tri_s[chunk][:, :, None, None, :]
        e0 = ((a[:, 2, :, :, 0] - a[:, 1, :, :, 0]) * (py - a[:, 1, :, :, 1])
              - (a[:, 2, :, :, 1] - a[:, 1, :, :, 1]) * (px - a[:, 1, :, :, 0]))
        e1 = ((a[:, 0, :, :, 0] - a[:, 2, :, :, 0]) * (py - a[:, 2, :, :, 1])
              - (a[:, 0, :, :, 1] - a[:, 2, :, :, 1]) * (px - a[:, 2, :, :, 0]))
        e2 = ((a[:, 1, :, :, 0] - a[:, 0, :, :, 0]) * (py - a[:, 0, :, :, 1])
              - (a[:, 1, :, :, 1] - a[:, 0, :, :, 1]) * (px - a[:, 0, :, :, 0]))
        aa = area2[chunk][:, None, None]
        b0 = e0 / aa
        b1 = e1 / aa
        b2 = e2 / aa
        inside = valid & (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        z = (b0 * tri_z[chunk][:, 0, None, None] + b1 * tri_z[chunk][:, 1, None, None]
             + b2 * tri_z[chunk][:, 2, None, None])
        fsel, rsel, csel = np.nonzero(inside)
        zq = np.clip((z[fsel, rsel, csel] + 1.0) * 0.5, 0.0, 1.0)
        key = (np.uint64(4294967295) * zq).astype(np.uint64) << np.uint64(32)
        key |= chunk[fsel].astype(np.uint64)
        pix = (y0[chunk][fsel] + rsel) * w + (x0[chunk][fsel] + csel)
        np.minimum.at(zkey, pix, key)

    hit = zkey != np.iinfo(np.uint64).max
    fid_flat = (zkey[hit] & np.uint64(0xFFFFFFFF)).astype(np.int64)
    rows, cols = np.nonzero(hit.reshape(h, w))
    fb.face_id[rows, cols] = fid_flat

    # perspective-correct barycentrics for winning faces only
    s = tri_s[fid_flat]
    pxc = cols + 0.5
    pyc = rows + 0.5
    e0 = ((s[:, 2, 0] - s[:, 1, 0]) * (pyc - s[:, 1, 1])
          - (s[:, 2, 1] - s[:, 1, 1]) * (pxc - s[:, 1, 0]))
    e1 = ((s[:, 0, 0] - s[:, 2, 0]) * (pyc - s[:, 2, 1])
          - (s[:, 0, 1] - s[:, 2, 1]) * (pxc - s[:, 2, 0]))
    e2 = ((s[:, 1, 0] - s[:, 0, 0]) * (pyc - s[:, 0, 1])
          - (s[:, 1, 1] - s[:, 0, 1]) * (pxc - s[:, 0, 0]))
    bs = np.stack([e0, e1, e2], axis=1) / area2[fid_flat][:, None]
    bp = bs / tri_w[fid_flat]
    bp /= bp.sum(axis=1, keepdims=True)
    fb.bary[rows, cols] = bp
    fb.depth[rows, cols] = (bs * tri_z[fid_flat]).sum(axis=1)

    if attributes is not None:
        fb.channels["attr"] = fb.interpolate(attributes)
    return fb


# ---------------------------------------------------------------------------
# Silhouette band

@dataclass
class SilhouetteBand:
    pix_rc: np.ndarray      # (K,2) row,col of banded pixels
    edge_id: np.ndarray     # (K,) index into edge_verts
    t: np.ndarray           # (K,) segment parameter of the closest point
    signed_d: np.ndarray    # (K,) screen-space distance, + inside coverage
    edge_verts: np.ndarray  # (E,2) mesh vertex ids per silhouette edge


def _silhouette_edges(mesh: TriMesh, screen: np.ndarray) -> np.ndarray:
    """Edges between faces of opposite screen orientation, plus boundary edges."""
    s = screen[mesh.faces]
    area2 = ((s[:, 1, 0] - s[:, 0, 0]) * (s[:, 2, 1] - s[:, 0, 1])
             - (s[:, 2, 0] - s[:, 0, 0]) * (s[:, 1, 1] - s[:, 0, 1]))
    front = area2 < 0  # CCW world winding appears clockwise in y-down screen coords
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    owner = np.tile(np.arange(mesh.n_faces), 3)
    uniq, inv, counts = np.unique(edges, axis=0, return_inverse=True, return_counts=True)
    flag = np.zeros(uniq.shape[0], dtype=np.int64)
    np.add.at(flag, inv, np.where(front[owner], 1, 0))
    sil = np.zeros(uniq.shape[0], dtype=bool)
    sil[counts == 1] = True                       # boundary
    two = counts == 2
    sil[two] = flag[two] == 1                     # one front, one back
    return uniq[sil]


def _soft_mask(mesh: TriMesh, screen: np.ndarray, hard: np.ndarray) -> tuple[np.ndarray, SilhouetteBand]:
    h, w = hard.shape
    edges = _silhouette_edges(mesh, screen)
    band = SilhouetteBand(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                          np.zeros(0), np.zeros(0), edges)
    mask = hard.astype(np.float64)
    if edges.shape[0] == 0:
        return mask, band

    a = screen[edges[:, 0]]
    b = screen[edges[:, 1]]
    r = SILHOUETTE_BAND_PX
    x0 = np.clip(np.floor(np.minimum(a[:, 0], b[:, 0]) - r - 1), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(np.maximum(a[:, 0], b[:, 0]) + r + 1), 0, w).astype(np.int64)
    y0 = np.clip(np.floor(np.minimum(a[:, 1], b[:, 1]) - r - 1), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(np.maximum(a[:, 1], b[:, 1]) + r + 1), 0, h).astype(np.int64)

    best = np.full(h * w, np.iinfo(np.uint64).max, dtype=np.uint64)
    bwid = x1 - x0
    bhgt = y1 - y0
    ok = (bwid > 0) & (bhgt > 0)
    order = np.nonzero(ok)[0][np.argsort((bwid * bhgt)[ok], kind="stable")]
    pos = 0
    while pos < order.size:
        take = 1
        max_area = bwid[order[pos]] * bhgt[order[pos]]
        while (pos + take < order.size
               and (take + 1) * max(max_area, bwid[order[pos + take]] * bhgt[order[pos + take]])
               <= _PIX_BUDGET):
            max_area = max(max_area, bwid[order[pos + take]] * bhgt[order[pos + take]])
            take += 1
        chunk = order[pos:pos + take]
        pos += take
        cbw = int(bwid[chunk].max())
        cbh = int(bhgt[chunk].max())
        gx = x0[chunk][:, None, None] + np.arange(cbw)[None, None, :] + 0.5
        gy = y0[chunk][:, None, None] + np.arange(cbh)[None, :, None] + 0.5
        valid = ((gx <= x1[chunk][:, None, None] - 0.5 + 1e-9)
                 & (gy <= y1[chunk][:, None, None] - 0.5 + 1e-9))
        ea = a[chunk][:, None, None, :]
        ab = (b[chunk] - a[chunk])[:, None, None, :]
        denom = np.maximum((ab * ab).sum(axis=3), 1e-12)
        t = np.clip(((gx - ea[..., 0]) * ab[..., 0] + (gy - ea[..., 1]) * ab[..., 1]) / denom,
                    0.0, 1.0)
        d = np.hypot(gx - (ea[..., 0] + t * ab[..., 0]), gy - (ea[..., 1] + t * ab[..., 1]))
        near = valid & (d <= r)
        if not near.any():
            continue
        esel, rr, cc = np.nonzero(near)
        pix = (y0[chunk][esel] + rr) * w + (x0[chunk][esel] + cc)
        key = (np.uint64(4294967295)
               * np.clip(d[esel, rr, cc] / (r + 1.0), 0, 1)).astype(np.uint64)
        key = (key << np.uint64(32)) | chunk[esel].astype(np.uint64)
        np.minimum.at(best, pix, key)

    sel = best != np.iinfo(np.uint64).max
    pix = np.nonzero(sel)[0]
    eid = (best[sel] & np.uint64(0xFFFFFFFF)).astype(np.int64)
    rows, cols = pix // w, pix % w
    pxc = cols + 0.5
    pyc = rows + 0.5
    ea = screen[edges[eid, 0]]
    eb = screen[edges[eid, 1]]
    ab = eb - ea
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12)
    t = np.clip(((pxc - ea[:, 0]) * ab[:, 0] + (pyc - ea[:, 1]) * ab[:, 1]) / denom, 0.0, 1.0)
    dist = np.hypot(pxc - (ea[:, 0] + t * ab[:, 0]), pyc - (ea[:, 1] + t * ab[:, 1]))
    sign = np.where(hard[rows, cols], 1.0, -1.0)
    sd = sign * dist
    mask[rows, cols] = 1.0 / (1.0 + np.exp(-SILHOUETTE_STEEPNESS * sd))
    return mask, SilhouetteBand(np.stack([rows, cols], axis=1), eid, t, sd, edges)


# ---------------------------------------------------------------------------
# Normal + mask rendering with backward to vertex positions

@dataclass
class NormalMaskRender:
    frame: FrameBuffer
    normal: np.ndarray        # (H,W,3)
    mask: np.ndarray          # (H,W,1)
    vertex_normals: np.ndarray
    raw_interp: np.ndarray    # pre-renormalization interpolated normals
    band: SilhouetteBand
    screen: np.ndarray


def render_normal_mask(mesh: TriMesh, camera: Camera) -> NormalMaskRender:
    """World-space normal image and soft-silhouette coverage mask."""
    h, w = camera.height, camera.width
    if mesh.is_empty():
        fb = rasterize(mesh, camera)
        return NormalMaskRender(fb, np.zeros((h, w, 3)), np.zeros((h, w, 1)),
                                np.zeros((0, 3)), np.zeros((h, w, 3)),
                                SilhouetteBand(np.zeros((0, 2), dtype=np.int64),
                                               np.zeros(0, dtype=np.int64), np.zeros(0),
                                               np.zeros(0), np.zeros((0, 2), dtype=np.int64)),
                                np.zeros((0, 2)))
    vn = compute_vertex_normals(mesh)
    fb = rasterize(mesh, camera)
    raw = fb.interpolate(vn)
    norm = np.linalg.norm(raw, axis=2, keepdims=True)
    n_img = np.where(norm > 1e-12, raw / np.maximum(norm, 1e-12), 0.0)
    screen, _, _ = project_vertices(mesh.vertices, camera)
    mask, band = _soft_mask(mesh, screen, fb.covered)
    return NormalMaskRender(fb, n_img, mask[:, :, None], vn, raw, band, screen)


def _vertex_normal_backward(mesh: TriMesh, g_vn: np.ndarray) -> np.ndarray:
    """Chain gradients on unit vertex normals back to vertex positions."""
    fn = face_normals(mesh, normalize=False)
    s = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(s, mesh.faces[:, k], fn)
    ns = np.linalg.norm(s, axis=1, keepdims=True)
    ns = np.maximum(ns, 1e-300)
    u = s / ns
    g_s = (g_vn - u * np.einsum("ij,ij->i", g_vn, u)[:, None]) / ns

    g_fn = g_s[mesh.faces[:, 0]] + g_s[mesh.faces[:, 1]] + g_s[mesh.faces[:, 2]]
    v = mesh.vertices
    f = mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    g_e1 = np.cross(e2, g_fn)
    g_e2 = np.cross(g_fn, e1)
    g_pos = np.zeros_like(v)
    np.add.at(g_pos, f[:, 0], -(g_e1 + g_e2))
    np.add.at(g_pos, f[:, 1], g_e1)
    np.add.at(g_pos, f[:, 2], g_e2)
    return g_pos


def render_backward(ctx: NormalMaskRender, g_normal: np.ndarray,
                    g_mask: np.ndarray) -> np.ndarray:
    """Pixel gradients on (normal, mask) back to mesh vertex positions.

    Position gradients flow through (i) vertex-normal recomputation and
    (ii) the soft silhouette band; interior coverage is treated as constant.
    """
    mesh = ctx.frame.mesh
    if mesh.is_empty():
        return np.zeros((0, 3))
    # renormalization backward
    raw = ctx.raw_interp
    norm = np.linalg.norm(raw, axis=2, keepdims=True)
    safe = np.maximum(norm, 1e-12)
    u = raw / safe
    g_n = np.asarray(g_normal, dtype=np.float64)
    g_raw = (g_n - u * np.einsum("hwc,hwc->hw", g_n, u)[:, :, None]) / safe
    g_raw = np.where(norm > 1e-12, g_raw, 0.0)
    g_vn = ctx.frame.scatter_to_attr(g_raw, 3)
    g_pos = _vertex_normal_backward(mesh, g_vn)
    g_pos += ctx.frame.position_grad_from_interp(ctx.vertex_normals, g_raw)

    # silhouette band backward
    band = ctx.band
    if band.pix_rc.shape[0]:
        gm = np.asarray(g_mask, dtype=np.float64)
        if gm.ndim == 3:
            gm = gm[:, :, 0]
        gm_pix = gm[band.pix_rc[:, 0], band.pix_rc[:, 1]]
        sig = 1.0 / (1.0 + np.exp(-SILHOUETTE_STEEPNESS * band.signed_d))
        g_sd = gm_pix * sig * (1.0 - sig) * SILHOUETTE_STEEPNESS
        ea_id = band.edge_verts[band.edge_id, 0]
        eb_id = band.edge_verts[band.edge_id, 1]
        ea = ctx.screen[ea_id]
        eb = ctx.screen[eb_id]
        t = band.t
        q = ea + t[:, None] * (eb - ea)
        p = band.pix_rc[:, ::-1] + 0.5      # (col,row) -> screen (x,y)
        diff = q - p
        dist = np.maximum(np.abs(band.signed_d), 1e-9)
        sign = np.sign(band.signed_d)
        g_dist = g_sd * sign
        g_q = diff / dist[:, None] * g_dist[:, None]
        jac = screen_jacobian(mesh.vertices, ctx.frame.camera)
        g_screen = np.zeros((mesh.n_vertices, 2))
        np.add.at(g_screen, ea_id, (1.0 - t)[:, None] * g_q)
        np.add.at(g_screen, eb_id, t[:, None] * g_q)
        g_pos += np.einsum("nk,nkj->nj", g_screen, jac)
    return g_pos


# ---------------------------------------------------------------------------
# PBR shading

@dataclass
class LightRig:
    directions: np.ndarray    # (L,3) unit, pointing from surface toward light
    radiance: np.ndarray      # (L,3) nonnegative
    ambient: np.ndarray       # (3,)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.directions /= np.linalg.norm(self.directions, axis=1, keepdims=True)
        self.radiance = np.asarray(self.radiance, dtype=np.float64).reshape(-1, 3)
        self.ambient = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        if self.directions.shape[0] < 1:
            raise ContractError("light rig needs at least one light")
        if np.any(self.radiance < 0) or np.any(self.ambient < 0):
            raise ContractError("radiance must be nonnegative")


def default_light_rig() -> LightRig:
    d = np.array([[1.0, 1.0, 1.0], [-1.0, 0.6, 0.8], [0.3, -1.0, -0.5], [-0.6, 0.4, -1.0]])
    rad = np.array([[1.6, 1.6, 1.6], [0.8, 0.8, 0.9], [0.5, 0.5, 0.5], [0.7, 0.7, 0.6]])
    return LightRig(d, rad, ambient=np.array([0.12, 0.12, 0.12]))


_F0_DIELECTRIC = 0.04
_EPS = 1e-6


def shade_pbr(kd: np.ndarray, roughness: np.ndarray, metalness: np.ndarray,
              n: np.ndarray, view: np.ndarray, lights: LightRig) -> np.ndarray:
    """Lambert diffuse + GGX specular per sample; flat (K,·) arrays in, (K,3) out."""
    out = np.zeros_like(kd)
    f0 = _F0_DIELECTRIC * (1.0 - metalness)[:, None] + kd * metalness[:, None]
    alpha = np.maximum(roughness, 1e-3) ** 2
    a2 = alpha ** 2
    ndv = np.maximum(np.einsum("ij,ij->i", n, view), _EPS)
    for l, rad in zip(lights.directions, lights.radiance):
        ndl = np.maximum(np.einsum("ij,j->i", n, l), 0.0)
        hv = l[None] + view
        hn = hv / np.maximum(np.linalg.norm(hv, axis=1, keepdims=True), _EPS)
        ndh = np.maximum(np.einsum("ij,ij->i", n, hn), 0.0)
        vdh = np.maximum(np.einsum("ij,ij->i", view, hn), _EPS)
        dd = ndh * ndh * (a2 - 1.0) + 1.0
        dist = a2 / (np.pi * dd * dd)
        fr = f0 + (1.0 - f0) * (1.0 - vdh)[:, None] ** 5
        lv = ndl * np.sqrt(ndv * ndv * (1.0 - a2) + a2)
        ll = ndv * np.sqrt(ndl * ndl * (1.0 - a2) + a2)
        vis = 0.5 / np.maximum(lv + ll, _EPS)
        diffuse = (1.0 - metalness)[:, None] * kd / np.pi
        spec = dist[:, None] * fr * vis[:, None]
        out += (diffuse + spec) * ndl[:, None] * rad[None]
    out += lights.ambient[None] * kd
    return np.maximum(out, 0.0)


def shade_pbr_backward(kd, roughness, metalness, n, view, lights: LightRig, g_out):
    """Analytic gradients of shade_pbr w.r.t. kd, roughness, metalness and n."""
    k = kd.shape[0]
    g_kd = np.zeros((k, 3))
    g_rough = np.zeros(k)
    g_metal = np.zeros(k)
    g_n = np.zeros((k, 3))
    g = np.asarray(g_out, dtype=np.float64)

    f0 = _F0_DIELECTRIC * (1.0 - metalness)[:, None] + kd * metalness[:, None]
    rough_c = np.maximum(roughness, 1e-3)
    alpha = rough_c ** 2
    a2 = alpha ** 2
    da2_drough = np.where(roughness > 1e-3, 4.0 * rough_c ** 3, 0.0)
    ndv_raw = np.einsum("ij,ij->i", n, view)
    ndv = np.maximum(ndv_raw, _EPS)
    dndv_dn = np.where(ndv_raw > _EPS, 1.0, 0.0)

    # The output clamp never bites for material channels in (0,1); treat the
    # shading model as smooth.
    g_kd += lights.ambient[None] * g

    for l, rad in zip(lights.directions, lights.radiance):
        ndl_raw = np.einsum("ij,j->i", n, l)
        ndl = np.maximum(ndl_raw, 0.0)
        lit = ndl_raw > 0
        hv = l[None] + view
        hlen = np.maximum(np.linalg.norm(hv, axis=1, keepdims=True), _EPS)
        hn = hv / hlen
        ndh_raw = np.einsum("ij,ij->i", n, hn)
        ndh = np.maximum(ndh_raw, 0.0)
        vdh = np.maximum(np.einsum("ij,ij->i", view, hn), _EPS)
        dd = ndh * ndh * (a2 - 1.0) + 1.0
        dist = a2 / (np.pi * dd * dd)
        one_m_vdh5 = (1.0 - vdh)[:, None] ** 5
        fr = f0 + (1.0 - f0) * one_m_vdh5
        sq_v = np.sqrt(ndv * ndv * (1.0 - a2) + a2)
        sq_l = np.sqrt(ndl * ndl * (1.0 - a2) + a2)
        lv = ndl * sq_v
        ll = ndv * sq_l
        den = np.maximum(lv + ll, _EPS)
        vis = 0.5 / den
        diffuse = (1.0 - metalness)[:, None] * kd / np.pi
        spec = dist[:, None] * fr * vis[:, None]

        grad_rad = g * rad[None]                      # (K,3)
        # d/d(diffuse+spec) * ndl
        gd_term = grad_rad * ndl[:, None]
        # diffuse
        g_kd += gd_term * (1.0 - metalness)[:, None] / np.pi
        g_metal += np.einsum("ij,ij->i", gd_term, -kd / np.pi)
        # specular: spec = dist * fr * vis
        g_dist = np.einsum("ij,ij->i", gd_term, fr) * vis
        g_fr = gd_term * (dist * vis)[:, None]
        g_vis = np.einsum("ij,ij->i", gd_term, fr) * dist
        # fr = f0 + (1-f0)(1-vdh)^5 -> f0
        g_f0 = g_fr * (1.0 - one_m_vdh5)
        g_kd += g_f0 * metalness[:, None]
        g_metal += np.einsum("ij,ij->i", g_f0, kd - _F0_DIELECTRIC)
        # dist = a2 / (pi dd^2); dd = ndh^2 (a2-1) + 1
        g_dd = -2.0 * dist / np.maximum(dd, _EPS) * g_dist
        g_a2 = g_dist / (np.pi * dd * dd) + g_dd * ndh * ndh
        g_ndh = g_dd * 2.0 * ndh * (a2 - 1.0) * (ndh_raw > 0)
        # vis = 0.5/den
        g_den = -vis / den * g_vis * (den > _EPS)
        g_ndl_sq = g_den * sq_v
        g_sqv = g_den * ndl
        g_ndv_sq = g_den * sq_l
        g_sql = g_den * ndv
        g_a2 += g_sqv * (1.0 - ndv * ndv) / np.maximum(2.0 * sq_v, _EPS)
        g_a2 += g_sql * (1.0 - ndl * ndl) / np.maximum(2.0 * sq_l, _EPS)
        g_ndv = g_sqv * ndv * (1.0 - a2) / np.maximum(sq_v, _EPS) + g_ndv_sq
        g_ndl = (g_sql * ndl * (1.0 - a2) / np.maximum(sq_l, _EPS) + g_ndl_sq) * lit
        # the (diffuse+spec)*ndl factor
        g_ndl += np.einsum("ij,ij->i", grad_rad, diffuse + spec) * lit
        g_rough += g_a2 * da2_drough
        g_n += g_ndl[:, None] * l[None]
        g_n += (g_ndh * (ndh_raw > 0))[:, None] * hn
        g_n += (g_ndv * dndv_dn)[:, None] * view
    return g_kd, g_rough, g_metal, g_n


def compose_shading_normal(n_geom: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Unit shading normal from the geometric normal and a bounded offset."""
    s = n_geom + delta
    return s / np.maximum(np.linalg.norm(s, axis=-1, keepdims=True), 1e-12)


def compose_shading_normal_backward(n_geom, delta, g_ns):
    s = n_geom + delta
    ns = np.maximum(np.linalg.norm(s, axis=-1, keepdims=True), 1e-12)
    u = s / ns
    g_s = (g_ns - u * np.sum(g_ns * u, axis=-1, keepdims=True)) / ns
    return g_s  # same for n_geom and delta


def tonemap_display(x: np.ndarray) -> np.ndarray:
    """Reinhard x/(1+x) then gamma 2.2; for display copies only."""
    t = np.clip(x, 0.0, None)
    return (t / (1.0 + t)) ** (1.0 / 2.2)


# ---------------------------------------------------------------------------
# Downscale (area average), a linear operator with exact transpose

def _box_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic overlap weights of uniform bins."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(np.floor(lo))
        j1 = int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def downscale(image: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Box-filter resample to (th, tw); exact block mean when sizes divide."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    th, tw = target_hw
    if th > h or tw > w:
        raise ContractError(f"downscale target {target_hw} exceeds source {(h, w)}")
    wy = _box_weights(h, th)
    wx = _box_weights(w, tw)
    out = np.einsum("ih,hwc,jw->ijc", wy, img, wx)
    return out[:, :, 0] if squeeze else out


def downscale_backward(grad_out: np.ndarray, source_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of downscale: spread target-pixel gradients over source pixels."""
    g = np.asarray(grad_out, dtype=np.float64)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[:, :, None]
    th, tw, _ = g.shape
    h, w = source_hw
    wy = _box_weights(h, th)
    wx = _box_weights(w, tw)
    out = np.einsum("ih,ijc,jw->hwc", wy, g, wx)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Camera sampling

FULL_BODY_DISTANCE = 2.6
PART_DISTANCE = 1.1
ELEVATION_RANGE = (-15.0, 30.0)


def sample_camera(mode: str, anchor: np.ndarray, seed: int,
                  width: int = 256, height: int = 256, fov_deg: float = 45.0,
                  distance: float | None = None) -> Camera:
    """Random view around `anchor`: azimuth uniform in [0, 360), elevation
    uniform in [-15, 30] degrees, fixed distance per mode."""
    if mode not in ("full_body", "part"):
        raise ContractError(f"unknown camera mode {mode!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = np.radians(rng.uniform(*ELEVATION_RANGE))
    if distance is None:
        distance = FULL_BODY_DISTANCE if mode == "full_body" else PART_DISTANCE
    anchor = np.asarray(anchor, dtype=np.float64)
    offset = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return Camera(fov_deg=fov_deg, position=tuple(anchor + offset), target=tuple(anchor),
                  width=width, height=height)


# ---------------------------------------------------------------------------
# Image I/O: float dumps ("TIMG") and 8-bit PNG display copies

_IMG_MAGIC = b"TIMG"


def save_timg(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(_IMG_MAGIC)
        fh.write(struct.pack("<3I", w, h, c))
        fh.write(img.astype("<f4").tobytes())


def load_timg(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _IMG_MAGIC:
            raise ContractError(f"{path}: not a float image dump (bad magic)")
        w, h, c = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    return data.reshape(h, w, c)


def save_png(path, image: np.ndarray, display_tonemap: bool = False) -> None:
    from PIL import Image
    img = np.asarray(image, dtype=np.float64)
    if display_tonemap:
        img = tonemap_display(img)
    img = np.clip(img, 0.0, 1.0)
    arr = np.round(img * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr
