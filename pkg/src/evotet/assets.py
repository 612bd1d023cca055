"""Mesh + texture export: box-projection UV atlas, texture baking, OBJ/MTL.

The atlas is deliberately simple: faces group into six charts by dominant
normal axis, each chart packs into a fixed cell of the texture.  Baking
inverts the projection per texel (nearest surface wins along the projection
axis) and samples the appearance field there, so a texel's color is exactly
the field value at a known surface point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssetIOError, ContractError
from .fieldgrid import FieldParams, appearance_transform, field_eval
from .pipeline import ScalingTransform
from .render import compose_shading_normal, save_png
from .sdfkit import TriMesh, compute_vertex_normals, face_normals, save_obj

_CHART_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}  # dominant axis -> in-plane axes
_PAD = 0.02


@dataclass
class UvAtlas:
    uvs: np.ndarray        # (K,2) in [0,1]^2
    uv_faces: np.ndarray   # (M,3) indices into uvs
    chart_of_face: np.ndarray


def build_box_uv_atlas(mesh: TriMesh) -> UvAtlas:
    """Six-chart box projection with per-chart normalization and 3x2 packing."""
    if mesh.is_empty():
        raise ContractError("cannot build an atlas for an empty mesh")
    fn = face_normals(mesh)
    axis = np.argmax(np.abs(fn), axis=1)
    sign = np.take_along_axis(fn, axis[:, None], axis=1)[:, 0] >= 0
    chart = axis * 2 + sign.astype(np.int64)

    key_of = {}
    uvs = []
    uv_faces = np.zeros_like(mesh.faces)
    local = np.zeros((mesh.n_vertices, 2))
    for c in range(6):
        faces_c = np.nonzero(chart == c)[0]
        if faces_c.size == 0:
            continue
        ua, va = _CHART_AXES[c // 2]
        vids = np.unique(mesh.faces[faces_c])
        p = mesh.vertices[vids][:, [ua, va]]
        lo = p.min(axis=0)
        span = np.maximum(p.max(axis=0) - lo, 1e-12)
        ploc = (p - lo) / span.max()          # isotropic per chart, no distortion
        ploc = ploc / max(ploc.max(), 1e-12)
        local[vids] = ploc
        col, row = c % 3, c // 3
        for fi in faces_c:
            for k in range(3):
                v = mesh.faces[fi, k]
                key = (c, int(v))
                if key not in key_of:
                    u = (col + _PAD + local[v, 0] * (1 - 2 * _PAD)) / 3.0
                    w = (row + _PAD + local[v, 1] * (1 - 2 * _PAD)) / 2.0
                    key_of[key] = len(uvs)
                    uvs.append((u, w))
                uv_faces[fi, k] = key_of[key]
    return UvAtlas(np.array(uvs), uv_faces, chart)


@dataclass
class BakeRecord:
    """Which surface point each filled texel came from (before dilation)."""
    texel_rc: np.ndarray    # (K,2) row, col
    points: np.ndarray      # (K,3) world-space surface points
    normals: np.ndarray     # (K,3) interpolated geometric normals


def bake_textures(mesh: TriMesh, atlas: UvAtlas, params: FieldParams,
                  transform: ScalingTransform, texture_size: int
                  ) -> tuple[dict, BakeRecord]:
    """Rasterize faces in UV space and sample the appearance field per texel."""
    t = texture_size
    vn = compute_vertex_normals(mesh)
    uv_px = atlas.uvs * t
    claim = np.full(t * t, np.iinfo(np.uint64).max, dtype=np.uint64)
    tex_pts = np.zeros((t * t, 3))
    tex_nrm = np.zeros((t * t, 3))
    axis = atlas.chart_of_face // 2
    sign = np.where(atlas.chart_of_face % 2 == 1, 1.0, -1.0)

    for fi in range(mesh.n_faces):
        tri = uv_px[atlas.uv_faces[fi]]
        x0 = max(int(np.floor(tri[:, 0].min())), 0)
        x1 = min(int(np.ceil(tri[:, 0].max())) + 1, t)
        y0 = max(int(np.floor(tri[:, 1].min())), 0)
        y1 = min(int(np.ceil(tri[:, 1].max())) + 1, t)
        if x1 <= x0 or y1 <= y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        d = ((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
             - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1]))
        if abs(d) < 1e-12:
            continue
        b1 = ((gx - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
              - (tri[2, 0] - tri[0, 0]) * (gy - tri[0, 1])) / d
        b2 = ((tri[1, 0] - tri[0, 0]) * (gy - tri[0, 1])
              - (gx - tri[0, 0]) * (tri[1, 1] - tri[0, 1])) / d
        b0 = 1.0 - b1 - b2
        inside = (b0 >= -1e-9) & (b1 >= -1e-9) & (b2 >= -1e-9)
        if not inside.any():
            continue
        yy, xx = np.nonzero(inside)
        bb = np.stack([b0[inside], b1[inside], b2[inside]], axis=1)
        corners = mesh.vertices[mesh.faces[fi]]
        pts = bb @ corners
        nrm = bb @ vn[mesh.faces[fi]]
        # prefer the surface furthest along the chart's outward axis
        depth = sign[fi] * pts[:, axis[fi]]
        q = np.clip((depth + 2.0) / 4.0, 0.0, 1.0)
        key = ((np.uint64(4294967295) * (1.0 - q)).astype(np.uint64) << np.uint64(32)
               | np.uint64(fi))
        pix = (y0 + yy) * t + (x0 + xx)
        np.minimum.at(claim, pix, key)
        won = claim[pix] == key
        tex_pts[pix[won]] = pts[won]
        tex_nrm[pix[won]] = nrm[won]

    filled = claim != np.iinfo(np.uint64).max
    idx = np.nonzero(filled)[0]
    pts = tex_pts[idx]
    nrm = tex_nrm[idx]
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    raw = field_eval(params, transform.apply(pts))
    mat = appearance_transform(raw)
    ns = compose_shading_normal(nrm, mat.normal_delta)

    albedo = np.zeros((t, t, 3))
    rm = np.zeros((t, t, 3))
    normal = np.full((t, t, 3), 0.5)
    rows, cols = idx // t, idx % t
    albedo[rows, cols] = mat.albedo
    rm[rows, cols, 0] = mat.roughness
    rm[rows, cols, 1] = mat.metalness
    normal[rows, cols] = (ns + 1.0) * 0.5

    mask = np.zeros((t, t), dtype=bool)
    mask[rows, cols] = True
    for img in (albedo, rm, normal):
        _dilate(img, mask.copy(), passes=2)

    record = BakeRecord(np.stack([rows, cols], axis=1), pts, nrm)
    return {"albedo": albedo, "rm": rm, "normal": normal}, record


def _dilate(img: np.ndarray, mask: np.ndarray, passes: int) -> None:
    """Grow filled texels into empty neighbors (in place) to pad chart seams."""
    for _ in range(passes):
        acc = np.zeros_like(img)
        cnt = np.zeros(mask.shape)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            sm = np.roll(mask, (dy, dx), axis=(0, 1))
            si = np.roll(img, (dy, dx), axis=(0, 1))
            acc += si * sm[:, :, None]
            cnt += sm
        grow = ~mask & (cnt > 0)
        img[grow] = acc[grow] / cnt[grow][:, None]
        mask |= grow


def export_assets(mesh: TriMesh, params: FieldParams, transform: ScalingTransform,
                  out_dir, texture_size: int = 1024) -> BakeRecord:
    """Write mesh.obj with UVs, the three texture PNGs and the material file."""
    from pathlib import Path
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        atlas = build_box_uv_atlas(mesh)
        textures, record = bake_textures(mesh, atlas, params, transform, texture_size)
        save_png(out / "albedo.png", textures["albedo"])
        save_png(out / "rm.png", textures["rm"])
        save_png(out / "normal.png", textures["normal"])
        with open(out / "material.mtl", "w", encoding="utf-8") as fh:
            fh.write("newmtl avatar\n")
            fh.write("map_Kd albedo.png\n")
            fh.write("map_Ks rm.png\n")       # R = roughness, G = metalness
            fh.write("map_Bump normal.png\n")
        save_obj(out / "mesh.obj", mesh, uvs=atlas.uvs, uv_faces=atlas.uv_faces,
                 mtl_name="avatar", mtl_file="material.mtl")
    except OSError as exc:
        raise AssetIOError(f"export to {out} failed: {exc}") from exc
    return record


def sample_texture_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (K,2) UV coordinates, matching the bake convention
    (texel centers at (i+0.5)/T)."""
    t = image.shape[0]
    x = np.clip(uv[:, 0] * t - 0.5, 0.0, t - 1.0)
    y = np.clip(uv[:, 1] * t - 0.5, 0.0, t - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, t - 1)
    y1 = np.minimum(y0 + 1, t - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
            + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))
