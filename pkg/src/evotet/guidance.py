"""Pluggable guidance oracle standing in for a diffusion-score signal.

A guidance backend looks at the rendered image of the current step and emits
a per-pixel gradient image.  Two desk-verifiable implementations ship here:
a reference-image oracle (gradient toward a target render) and a stochastic
mock that has the statistical shape of a score-distillation signal (zero-mean
noise plus a smoothing drift) without any semantics.  `apply_guidance` chains
the image-space gradient through the rasterizer, marching tetrahedra and the
field to produce parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dmtet import (MtProvenance, TetGrid, evaluate_grid, evaluate_grid_backward,
                    marching_tetrahedra, mt_backward)
from .errors import ContractError
from .fieldgrid import FieldParams
from .render import (Camera, NormalMaskRender, downscale, downscale_backward,
                     load_timg, render_backward, render_normal_mask)
from .sdfkit import TriMesh


@dataclass(frozen=True)
class GuidanceConfig:
    stage: str = "coarse_normal"       # coarse_normal | refine_normal | color
    t_min: float = 0.02
    t_max: float = 0.98
    weighting: str = "constant"        # constant | one_minus_alpha
    strength: float = 1.0
    blur_sigma: float = 1.5            # mock denoiser blur, in pixels
    noise_scale: float = 1.0           # sigma(t) = noise_scale * t in the mock
    anneal_t_max: bool = False         # off by default; linear 0.98 -> 0.5

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ContractError(f"invalid timestep range [{self.t_min}, {self.t_max}]")
        if self.strength < 0:
            raise ContractError("guidance strength must be >= 0")
        if self.stage not in ("coarse_normal", "refine_normal", "color"):
            raise ContractError(f"unknown guidance stage {self.stage!r}")
        if self.weighting not in ("constant", "one_minus_alpha"):
            raise ContractError(f"unknown weighting {self.weighting!r}")


def draw_timestep(config: GuidanceConfig, rng: np.random.Generator,
                  progress: float = 0.0) -> float:
    t_max = config.t_max
    if config.anneal_t_max:
        t_max = config.t_max + (0.5 - config.t_max) * np.clip(progress, 0.0, 1.0)
        t_max = max(t_max, config.t_min + 1e-6)
    return float(rng.uniform(config.t_min, t_max))


def weight_of(config: GuidanceConfig, t: float) -> float:
    if config.weighting == "constant":
        return 1.0
    return (1.0 - t) ** 2


@dataclass
class GuidanceSignal:
    gradient: np.ndarray   # same shape as the guidance input
    diagnostic: float      # scalar loss estimate for curves/monitoring
    t: float


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def prep_coarse_input(n: np.ndarray, a: np.ndarray,
                      target_hw: tuple[int, int]) -> np.ndarray:
    """Concatenate normal (H,W,3) and mask (H,W,1) then box-downscale to 4ch."""
    n = np.asarray(n, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if n.shape[:2] != a.shape[:2] or n.shape[2] != 3 or a.shape[2] != 1:
        raise ContractError(f"bad shapes for coarse input: {n.shape}, {a.shape}")
    return downscale(np.concatenate([n, a], axis=2), target_hw)


def prep_coarse_input_backward(grad_na: np.ndarray,
                               source_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Route 4-channel downscaled gradients back to (n, a)."""
    g = downscale_backward(np.asarray(grad_na, dtype=np.float64), source_hw)
    return g[:, :, 0:3], g[:, :, 3:4]


def reference_guidance(input_img: np.ndarray, reference: np.ndarray,
                       config: GuidanceConfig, rng_or_seed=0,
                       progress: float = 0.0) -> GuidanceSignal:
    """Gradient toward a reference image: strength * w(t) * (input - reference)."""
    x = np.asarray(input_img, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if x.shape != r.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {r.shape}")
    t = draw_timestep(config, _as_rng(rng_or_seed), progress)
    diff = x - r
    return GuidanceSignal(gradient=config.strength * weight_of(config, t) * diff,
                          diagnostic=0.5 * float(np.sum(diff ** 2)), t=t)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable reflect-padded blur; exact identity at sigma == 0."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()

    def conv_axis(a, axis):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (radius, radius)
        ap = np.pad(a, pad, mode="reflect")
        out = np.zeros_like(a)
        for i, kv in enumerate(k):
            sl = [slice(None)] * a.ndim
            sl[axis] = slice(i, i + a.shape[axis])
            out += kv * ap[tuple(sl)]
        return out

    out = conv_axis(img, 0)
    return conv_axis(out, 1)


def mock_sds_guidance(input_img: np.ndarray, config: GuidanceConfig,
                      seed: int, progress: float = 0.0) -> GuidanceSignal:
    """Statistical stand-in for a score signal: w(t) * (z - blur(z)) with
    z = input + sigma(t) * eps.  Zero-mean noise over seeds plus a smoothing
    drift; deterministic per seed; carries no semantics."""
    rng = _as_rng(seed)
    x = np.asarray(input_img, dtype=np.float64)
    t = draw_timestep(config, rng, progress)
    sigma = config.noise_scale * t
    z = x + sigma * rng.standard_normal(x.shape) if sigma > 0 else x
    resid = z - _gaussian_blur(z, config.blur_sigma)
    return GuidanceSignal(gradient=config.strength * weight_of(config, t) * resid,
                          diagnostic=0.5 * float(np.sum(resid ** 2)), t=t)


# ---------------------------------------------------------------------------
# Geometry-step forward wiring and the guidance backward chain

@dataclass
class GeometryStepRender:
    """Everything retained from one geometry render, for the backward chain."""
    grid: TetGrid
    params: FieldParams
    grid_tape: list
    mesh: TriMesh
    prov: MtProvenance
    render: NormalMaskRender
    coarse_target: tuple[int, int] | None   # set in the coarse stage


def render_geometry_step(grid: TetGrid, params: FieldParams, camera: Camera,
                         coarse_target: tuple[int, int] | None = None):
    """Evaluate grid, extract the mesh, render normal+mask; returns the entry
    and the guidance input (4-channel n_a when coarse, else the normal image)."""
    tape: list = []
    evaluate_grid(grid, params, tape_out=tape)
    mesh, prov = marching_tetrahedra(grid)
    r = render_normal_mask(mesh, camera)
    entry = GeometryStepRender(grid, params, tape, mesh, prov, r, coarse_target)
    if coarse_target is not None:
        return entry, prep_coarse_input(r.normal, r.mask, coarse_target)
    return entry, r.normal


def apply_guidance(signal: GuidanceSignal, entry: GeometryStepRender) -> np.ndarray:
    """Chain an image-space guidance gradient to field parameter gradients."""
    if entry.mesh.is_empty():
        return np.zeros_like(entry.params.values)
    h, w = entry.render.normal.shape[:2]
    if entry.coarse_target is not None:
        if signal.gradient.shape != (*entry.coarse_target, 4):
            raise ContractError(
                f"signal shape {signal.gradient.shape} does not match coarse input "
                f"{(*entry.coarse_target, 4)}")
        g_n, g_a = prep_coarse_input_backward(signal.gradient, (h, w))
    else:
        if signal.gradient.shape != entry.render.normal.shape:
            raise ContractError("signal shape does not match the normal render")
        g_n, g_a = signal.gradient, np.zeros((h, w, 1))
    g_pos = render_backward(entry.render, g_n, g_a)
    g_sdf, g_off = mt_backward(entry.prov, g_pos)
    return evaluate_grid_backward(entry.grid, entry.params, g_sdf, g_off,
                                  tape=entry.grid_tape)


# ---------------------------------------------------------------------------
# Guidance backends the pipeline can plug in

class ReferenceMeshBackend:
    """Renders a target mesh at the requested camera and pulls toward it.

    For the color stage the target carries per-vertex colors (flat part
    colors, optionally with painted features); the reference image is their
    interpolated render masked to coverage.
    """

    def __init__(self, target: TriMesh, config: GuidanceConfig,
                 vertex_colors: np.ndarray | None = None):
        self.target = target
        self.config = config
        self.vertex_colors = vertex_colors

    def fixed_camera(self, step: int):
        return None

    def geometry_signal(self, image: np.ndarray, camera: Camera, rng,
                        coarse_target=None, progress: float = 0.0) -> GuidanceSignal:
        r = render_normal_mask(self.target, camera)
        if coarse_target is not None:
            ref = prep_coarse_input(r.normal, r.mask, coarse_target)
        else:
            ref = r.normal
        return reference_guidance(image, ref, self.config, rng, progress)

    def color_signal(self, image: np.ndarray, camera: Camera, rng,
                     progress: float = 0.0) -> GuidanceSignal:
        if self.vertex_colors is None:
            raise ContractError("color guidance needs target vertex colors")
        from .render import rasterize
        fb = rasterize(self.target, camera, attributes=self.vertex_colors)
        ref = fb.channels["attr"]
        return reference_guidance(image, ref, self.config, rng, progress)


class MockSdsBackend:
    """Stochastic SDS-shaped signal for robustness experiments."""

    def __init__(self, config: GuidanceConfig, seed: int = 0):
        self.config = config
        self.seed = seed

    def fixed_camera(self, step: int):
        return None

    def geometry_signal(self, image, camera, rng, coarse_target=None,
                        progress: float = 0.0) -> GuidanceSignal:
        del camera, coarse_target
        seed = int(_as_rng(rng).integers(0, 2 ** 62))
        return mock_sds_guidance(image, self.config, seed, progress)

    def color_signal(self, image, camera, rng, progress: float = 0.0) -> GuidanceSignal:
        del camera
        seed = int(_as_rng(rng).integers(0, 2 ** 62))
        return mock_sds_guidance(image, self.config, seed, progress)


def load_camera_file(path) -> Camera:
    """Plain-text camera: fov, position, target, up, width, height lines."""
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            fields[tok[0].lower()] = [float(x) for x in tok[1:]]
    try:
        return Camera(fov_deg=fields["fov"][0],
                      position=tuple(fields["position"]),
                      target=tuple(fields["target"]),
                      up=tuple(fields.get("up", [0.0, 1.0, 0.0])),
                      width=int(fields["width"][0]),
                      height=int(fields["height"][0]))
    except KeyError as missing:
        raise ContractError(f"{path}: camera file missing field {missing}") from None


def save_camera_file(path, camera: Camera) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"fov {camera.fov_deg:.9g}\n")
        fh.write("position " + " ".join(f"{v:.9g}" for v in camera.position) + "\n")
        fh.write("target " + " ".join(f"{v:.9g}" for v in camera.target) + "\n")
        fh.write("up " + " ".join(f"{v:.9g}" for v in camera.up) + "\n")
        fh.write(f"width {camera.width}\n")
        fh.write(f"height {camera.height}\n")


class ReferenceDirectoryBackend:
    """Reference images from a directory of TIMG dumps with camera sidecars.

    Pairs are `<stem>.timg` + `<stem>.cam`; step k uses pair k mod n and the
    stored camera replaces the sampled one.
    """

    def __init__(self, directory, config: GuidanceConfig):
        self.config = config
        root = Path(directory)
        stems = sorted(p.stem for p in root.glob("*.timg"))
        if not stems:
            raise ContractError(f"{directory}: no .timg reference images")
        self.pairs = []
        for s in stems:
            cam_path = root / f"{s}.cam"
            if not cam_path.exists():
                raise ContractError(f"{directory}: missing camera file for {s}")
            self.pairs.append((load_timg(root / f"{s}.timg"), load_camera_file(cam_path)))

    def fixed_camera(self, step: int) -> Camera:
        return self.pairs[step % len(self.pairs)][1]

    def _signal(self, image, step_img, rng, progress):
        return reference_guidance(image, step_img, self.config, rng, progress)

    def geometry_signal(self, image, camera, rng, coarse_target=None,
                        progress: float = 0.0, step: int = 0) -> GuidanceSignal:
        ref = self.pairs[step % len(self.pairs)][0]
        if coarse_target is not None and ref.shape[:2] != tuple(coarse_target):
            ref = downscale(ref, coarse_target)
        return self._signal(image, ref, rng, progress)

    def color_signal(self, image, camera, rng, progress: float = 0.0,
                     step: int = 0) -> GuidanceSignal:
        return self._signal(image, self.pairs[step % len(self.pairs)][0], rng, progress)
