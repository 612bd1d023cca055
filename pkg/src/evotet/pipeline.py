"""Stage orchestration: init -> coarse -> subdivide -> refine -> appearance.

Also home to the Adam optimizer, uniform scaling, mesh metrics, the run
configuration with its key-value file format, and everything the CLI calls.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import prior as priorlib
from .constraints import (LossWeights, TemplateState, loss_lightness,
                          loss_normal_global, loss_normal_local,
                          sdf_loss_against_values, template_update_appearance,
                          template_update_geometry)
from .dmtet import TetGrid, evaluate_grid, grid_init, marching_tetrahedra, subdivide_near_surface
from .errors import ConfigurationError, ContractError, NumericError
from .fieldgrid import (FieldConfig, FieldParams, appearance_transform,
                        appearance_transform_backward, field_backward,
                        field_eval, field_eval_with_tape, field_init)
from .guidance import (GuidanceConfig, MockSdsBackend, ReferenceDirectoryBackend,
                       ReferenceMeshBackend, apply_guidance, render_geometry_step)
from .render import (Camera, LightRig, compose_shading_normal,
                     compose_shading_normal_backward, default_light_rig,
                     rasterize, render_normal_mask, sample_camera, shade_pbr,
                     shade_pbr_backward)
from .sdfkit import (MeshSdf, PointSampleSet, SdfSource, TriMesh, clean_mesh,
                     compute_vertex_normals, extract_part, fit_to_unit_cube,
                     load_obj, sample_constraint_points, sample_on_surface)


# ---------------------------------------------------------------------------
# Optimizer

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        values -= self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# Uniform scaling

@dataclass(frozen=True)
class ScalingTransform:
    p_min: tuple[float, float, float]
    s: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.p_min)) / self.s


def normalize_points_uniform(points: np.ndarray, bbox=None
                             ) -> tuple[np.ndarray, ScalingTransform]:
    """Isotropic normalization: longest bbox axis maps to [0,1], distance
    ratios are preserved exactly."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if bbox is None:
        p_min, p_max = pts.min(axis=0), pts.max(axis=0)
    else:
        p_min, p_max = (np.asarray(b, dtype=np.float64) for b in bbox)
    extents = p_max - p_min
    s = float(np.max(extents))
    if s <= 0:
        raise ContractError("degenerate bounding box")
    tr = ScalingTransform(tuple(p_min), s)
    return tr.apply(pts), tr


def normalize_points_per_axis(points: np.ndarray, bbox=None) -> np.ndarray:
    """Anisotropic per-axis normalization; kept only as the distorting
    baseline that the uniform mode is measured against."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if bbox is None:
        p_min, p_max = pts.min(axis=0), pts.max(axis=0)
    else:
        p_min, p_max = (np.asarray(b, dtype=np.float64) for b in bbox)
    extents = p_max - p_min
    if np.any(extents <= 0):
        raise ContractError("degenerate bounding box")
    return (pts - p_min) / extents


# ---------------------------------------------------------------------------
# Mesh metrics

def metrics(mesh_a: TriMesh, mesh_b: TriMesh, n_samples: int = 10_000,
            seed: int = 0) -> dict:
    """Symmetric chamfer (mean bidirectional nearest-surface distance) and
    Hausdorff (max), over seeded area-weighted surface samples."""
    if mesh_a.is_empty() or mesh_b.is_empty():
        raise ContractError("metrics need non-empty meshes")
    rng = np.random.Generator(np.random.PCG64(seed))
    pa = sample_on_surface(mesh_a, n_samples, rng)
    pb = sample_on_surface(mesh_b, n_samples, rng)
    da = MeshSdf(mesh_b, assume_watertight=True).unsigned(pa)[0]
    db = MeshSdf(mesh_a, assume_watertight=True).unsigned(pb)[0]
    both = np.concatenate([da, db])
    return {"chamfer": float(both.mean()), "hausdorff": float(both.max())}


def mean_dihedral_roughness(mesh: TriMesh) -> float:
    """Mean angle between adjacent face normals; higher = bumpier surface."""
    from .sdfkit import face_normals
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    owner = np.tile(np.arange(mesh.n_faces), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    o = owner[order]
    same = np.all(e[:-1] == e[1:], axis=1)
    fa, fb = o[:-1][same], o[1:][same]
    n = face_normals(mesh)
    cos = np.clip(np.einsum("ij,ij->i", n[fa], n[fb]), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)))


# ---------------------------------------------------------------------------
# Run configuration

@dataclass
class StepsSection:
    init: int = 300
    coarse: int = 1500
    refine: int = 1000
    appearance: int = 800


@dataclass
class GridSection:
    resolution: int = 64
    subdivide_threshold: float = 0.2
    subdivide_use_abs: bool = True


@dataclass
class RenderSection:
    geometry_size: int = 256
    color_size: int = 256
    coarse_guidance_size: int = 64
    fov_deg: float = 45.0
    full_body_distance: float = 2.6
    part_distance: float = 1.1
    part_camera_prob: float = 0.3


@dataclass
class FieldSection:
    levels: int = 4
    base_resolution: int = 4
    growth_factor: float = 2.0
    features_per_level: int = 2
    table_size: int = 16384
    mlp_hidden: tuple = (32, 32)
    output_dim: int = 4

    def to_field_config(self) -> FieldConfig:
        return FieldConfig(levels=self.levels, base_resolution=self.base_resolution,
                           growth_factor=self.growth_factor,
                           features_per_level=self.features_per_level,
                           table_size=self.table_size,
                           mlp_hidden=tuple(self.mlp_hidden),
                           output_dim=self.output_dim)


@dataclass
class TemplatesSection:
    geometry_interval: int = 5000
    appearance_interval: int = 200
    appearance_init_step: int = 400


@dataclass
class OptimizerSection:
    lr_geometry: float = 1e-3
    lr_appearance: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-15


@dataclass
class SamplingSection:
    surface: int = 8192
    random: int = 2048
    jitter_sigma: float = 0.02
    part_surface: int = 512


@dataclass
class GuidanceSection:
    backend: str = "reference_figure"     # reference_figure | reference_dir | mock
    reference_dir: str = ""
    target_preset: str = "wide_torso"
    strength: float = 1.0
    t_min: float = 0.02
    t_max: float = 0.98
    weighting: str = "constant"
    blur_sigma: float = 1.5
    noise_scale: float = 1.0
    anneal_t_max: bool = False

    def to_guidance_config(self, stage: str) -> GuidanceConfig:
        return GuidanceConfig(stage=stage, t_min=self.t_min, t_max=self.t_max,
                              weighting=self.weighting, strength=self.strength,
                              blur_sigma=self.blur_sigma, noise_scale=self.noise_scale,
                              anneal_t_max=self.anneal_t_max)


@dataclass
class OutputSection:
    directory: str = "runs/out"
    texture_size: int = 1024
    lightness_scale_divisor: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    prior: str = "figure:default"     # "figure:<preset>" or a labeled OBJ path
    steps: StepsSection = field(default_factory=StepsSection)
    grid: GridSection = field(default_factory=GridSection)
    render: RenderSection = field(default_factory=RenderSection)
    field_geometry: FieldSection = field(default_factory=FieldSection)
    field_appearance: FieldSection = field(default_factory=lambda: FieldSection(output_dim=8))
    weights: LossWeights = field(default_factory=LossWeights)
    templates: TemplatesSection = field(default_factory=TemplatesSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    output: OutputSection = field(default_factory=OutputSection)


def _coerce(text: str, old):
    text = text.strip()
    try:
        if isinstance(old, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(old, int):
            return int(text)
        if isinstance(old, float):
            return float(text)
        if isinstance(old, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip()) if text else ()
        if isinstance(old, dict):
            out = {}
            for pair in text.split(","):
                if not pair.strip():
                    continue
                k, v = pair.split(":")
                out[int(k)] = float(v)
            return out
        return text
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {text!r}: {exc}") from None


def load_config(path) -> RunConfig:
    """UTF-8 key-value file with dotted sections mirroring RunConfig fields."""
    cfg = RunConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{ln}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            parts = key.split(".")
            target = cfg
            for p in parts[:-1]:
                if not hasattr(target, p):
                    raise ConfigurationError(f"{path}:{ln}: unknown section {p!r}")
                target = getattr(target, p)
            leaf = parts[-1]
            if not hasattr(target, leaf):
                raise ConfigurationError(f"{path}:{ln}: unknown key {key!r}")
            old = getattr(target, leaf)
            if dataclasses.is_dataclass(old):
                raise ConfigurationError(f"{path}:{ln}: {key!r} is a section, not a key")
            setattr(target, leaf, _coerce(value, old))
    validate_config(cfg)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []

    def emit(prefix, obj):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v) and not isinstance(v, type):
                emit(key + ".", v)
            elif isinstance(v, tuple):
                lines.append(f"{key} = {','.join(str(x) for x in v)}")
            elif isinstance(v, dict):
                lines.append(f"{key} = {','.join(f'{k}:{val}' for k, val in sorted(v.items()))}")
            else:
                lines.append(f"{key} = {v}")

    emit("", cfg)
    return "\n".join(lines) + "\n"


def validate_config(cfg: RunConfig) -> None:
    s = cfg.steps
    if min(s.init, s.coarse, s.refine, s.appearance) < 0:
        raise ConfigurationError("step counts must be >= 0")
    o = cfg.optimizer
    if o.lr_geometry <= 0 or o.lr_appearance <= 0:
        raise ConfigurationError("learning rates must be > 0")
    if cfg.grid.resolution < 2:
        raise ConfigurationError("grid resolution must be >= 2")
    if cfg.guidance.backend not in ("reference_figure", "reference_dir", "mock"):
        raise ConfigurationError(f"unknown guidance backend {cfg.guidance.backend!r}")
    try:
        cfg.field_geometry.to_field_config()
        cfg.field_appearance.to_field_config()
    except ContractError as exc:
        raise ConfigurationError(str(exc)) from None


# ---------------------------------------------------------------------------
# Run context

STAGE_INIT, STAGE_COARSE, STAGE_REFINE, STAGE_APPEARANCE = 1, 2, 3, 4

PART_COLOR_PALETTE = {
    priorlib.PART_BODY: (0.35, 0.42, 0.62),
    priorlib.PART_HEAD: (0.78, 0.62, 0.52),
    priorlib.PART_HAND: (0.78, 0.62, 0.52),
    priorlib.PART_FOOT: (0.22, 0.18, 0.16),
}


@dataclass
class RunContext:
    config: RunConfig
    prior_mesh: TriMesh
    prior_source: SdfSource
    state: TemplateState
    anchors: dict
    backend: object
    samples: PointSampleSet | None = None
    template_values: np.ndarray | None = None
    part_samples: list = field(default_factory=list)
    part_targets: dict = field(default_factory=dict)
    part_meshes: dict = field(default_factory=dict)
    loss_rows: list = field(default_factory=list)
    global_step: int = 0
    grid: TetGrid | None = None
    light_rig: LightRig = field(default_factory=default_light_rig)


def load_prior(cfg: RunConfig) -> tuple[TriMesh, SdfSource]:
    if cfg.prior.startswith("figure:"):
        preset = cfg.prior.split(":", 1)[1]
        if preset not in priorlib.FIGURE_PRESETS:
            raise ConfigurationError(f"unknown figure preset {preset!r}")
        return priorlib.build_figure(priorlib.FIGURE_PRESETS[preset],
                                     resolution=max(32, cfg.grid.resolution // 2 * 2))
    mesh = load_obj(cfg.prior)
    mesh = fit_to_unit_cube(mesh, margin=0.15)
    if mesh.part_labels is None:
        mesh.part_labels = np.zeros(mesh.n_vertices, dtype=np.int64)
    return mesh, MeshSdf(mesh)


def make_backend(cfg: RunConfig):
    g = cfg.guidance
    if g.backend == "mock":
        return MockSdsBackend(g.to_guidance_config("coarse_normal"), seed=cfg.seed)
    if g.backend == "reference_dir":
        return ReferenceDirectoryBackend(g.reference_dir, g.to_guidance_config("coarse_normal"))
    spec = priorlib.FIGURE_PRESETS.get(g.target_preset)
    if spec is None:
        raise ConfigurationError(f"unknown target preset {g.target_preset!r}")
    target, _ = priorlib.build_figure(spec, resolution=max(32, cfg.grid.resolution // 2 * 2))
    colors = np.array([PART_COLOR_PALETTE[int(l)] for l in target.part_labels])
    return ReferenceMeshBackend(target, g.to_guidance_config("coarse_normal"),
                                vertex_colors=colors)


def prepare_run(cfg: RunConfig) -> RunContext:
    prior_mesh, prior_source = load_prior(cfg)
    t = cfg.templates
    state = TemplateState.from_prior(prior_source, prior_mesh,
                                     geometry_interval=t.geometry_interval,
                                     appearance_interval=t.appearance_interval,
                                     appearance_init_step=t.appearance_init_step)
    ctx = RunContext(config=cfg, prior_mesh=prior_mesh, prior_source=prior_source,
                     state=state, anchors=priorlib.part_anchors(prior_mesh),
                     backend=make_backend(cfg))
    _resample_constraints(ctx, prior_mesh, seed_tag=0)
    ctx.template_values = prior_source.query(ctx.samples.points)
    # static local sets around the labeled prior parts
    for part_id in sorted(set(cfg.weights.part_weights) | set(cfg.weights.part_normal_weights)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            part = extract_part(prior_mesh, part_id)
        if part.is_empty():
            continue
        ctx.part_meshes[part_id] = part
        if part_id not in cfg.weights.part_weights:
            continue
        q = sample_constraint_points(part, cfg.sampling.part_surface, 0,
                                     jitter_sigma=cfg.sampling.jitter_sigma,
                                     seed=_seed_of(cfg.seed, 90, part_id),
                                     part_id=part_id)
        ctx.part_samples.append(q)
        ctx.part_targets[part_id] = prior_source.query(q.points)
    return ctx


def _seed_of(base: int, *tags: int) -> int:
    ss = np.random.SeedSequence([int(base), *map(int, tags)])
    return int(ss.generate_state(1, np.uint64)[0] % (2 ** 62))


def _resample_constraints(ctx: RunContext, around: TriMesh, seed_tag: int) -> None:
    c = ctx.config.sampling
    ctx.samples = sample_constraint_points(
        around, c.surface, c.random, jitter_sigma=c.jitter_sigma,
        seed=_seed_of(ctx.config.seed, 1, seed_tag))


def _local_loss(ctx: RunContext, params: FieldParams) -> tuple[float, np.ndarray]:
    w = ctx.config.weights.part_weights
    total, grad = 0.0, np.zeros_like(params.values)
    for q in ctx.part_samples:
        wi = w.get(q.part_id, 0.0)
        if wi == 0.0:
            continue
        v, g = sdf_loss_against_values(params, q.points, ctx.part_targets[q.part_id])
        total += wi * v
        grad += wi * g
    return total, grad


def _pick_camera(ctx: RunContext, stage_tag: int, step: int, size: int) -> Camera:
    fixed = ctx.backend.fixed_camera(step)
    if fixed is not None:
        return fixed
    cfg = ctx.config.render
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([ctx.config.seed, stage_tag, step, 7])))
    part_ids = [k for k in sorted(ctx.anchors) if k != priorlib.PART_BODY]
    body_anchor = ctx.prior_mesh.vertices.mean(axis=0)
    if part_ids and rng.uniform() < cfg.part_camera_prob:
        pid = part_ids[int(rng.integers(len(part_ids)))]
        return sample_camera("part", ctx.anchors[pid],
                             seed=_seed_of(ctx.config.seed, stage_tag, step, 8),
                             width=size, height=size, fov_deg=cfg.fov_deg,
                             distance=cfg.part_distance)
    return sample_camera("full_body", body_anchor,
                         seed=_seed_of(ctx.config.seed, stage_tag, step, 8),
                         width=size, height=size, fov_deg=cfg.fov_deg,
                         distance=cfg.full_body_distance)


def _log(ctx: RunContext, stage: str, **components) -> None:
    total = float(sum(components.values()))
    if not np.isfinite(total):
        raise NumericError(f"{stage}: loss diverged at step {ctx.global_step}")
    row = {"stage": stage, "step": ctx.global_step, **components, "total": total}
    ctx.loss_rows.append(row)
    ctx.global_step += 1


# ---------------------------------------------------------------------------
# Stages

def stage_init(cfg: RunConfig, ctx: RunContext) -> FieldParams:
    """Fit the geometry field to the prior SDF (Adam on the alignment loss)."""
    params = field_init(cfg.field_geometry.to_field_config(), seed=cfg.seed)
    adam = Adam(lr=cfg.optimizer.lr_geometry * 3.0, beta1=cfg.optimizer.beta1,
                beta2=cfg.optimizer.beta2, eps=cfg.optimizer.epsilon)
    pts = ctx.samples.points
    target = ctx.prior_source.query(pts)
    for k in range(cfg.steps.init):
        if k > 0 and k % 25 == 0:
            # fresh batches keep the field honest between the fixed samples
            batch = sample_constraint_points(
                ctx.prior_mesh, cfg.sampling.surface, cfg.sampling.random,
                jitter_sigma=cfg.sampling.jitter_sigma,
                seed=_seed_of(cfg.seed, STAGE_INIT, k))
            pts = batch.points
            target = ctx.prior_source.query(pts)
        v, g = sdf_loss_against_values(params, pts, target)
        adam.step(params.values, g)
        _log(ctx, "init", sdf_init=v)
    held_out = sample_constraint_points(
        ctx.prior_mesh, 2048, 512, jitter_sigma=cfg.sampling.jitter_sigma,
        seed=_seed_of(cfg.seed, 99))
    pred = field_eval(params, (held_out.points + 1.0) * 0.5)[:, 0]
    err = float(np.mean(np.abs(pred - ctx.prior_source.query(held_out.points))))
    ctx.init_heldout_error = err
    return params


def _geometry_step(cfg: RunConfig, ctx: RunContext, params: FieldParams,
                   adam: Adam, stage_tag: int, stage_name: str, step: int,
                   n_steps: int, refine: bool) -> None:
    size = cfg.render.geometry_size
    coarse_target = None if refine else (cfg.render.coarse_guidance_size,) * 2
    camera = _pick_camera(ctx, stage_tag, step, size)
    progress = step / max(n_steps, 1)
    entry, img = render_geometry_step(ctx.grid, params, camera, coarse_target)

    components = {}
    grad = np.zeros_like(params.values)
    w = cfg.weights

    if entry.mesh.is_empty():
        warnings.warn(f"{stage_name}: empty mesh at step {step}; constraints only",
                      RuntimeWarning, stacklevel=2)
        components["sds"] = 0.0
    else:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, stage_tag, step, 9])))
        kw = {"step": step} if isinstance(ctx.backend, ReferenceDirectoryBackend) else {}
        signal = ctx.backend.geometry_signal(img, camera, rng,
                                             coarse_target=coarse_target,
                                             progress=progress, **kw)
        g_sds = apply_guidance(signal, entry)
        grad += w.lambda_sds * g_sds
        components["sds"] = w.lambda_sds * signal.diagnostic

        if refine and (w.beta_global > 0 or w.beta_local > 0):
            g_img = np.zeros_like(entry.render.normal)
            if w.beta_global > 0:
                tmpl_r = render_normal_mask(ctx.state.template_mesh, camera)
                v_glb, g_glb = loss_normal_global(entry.render.normal, tmpl_r.normal)
                components["normal_global"] = w.beta_global * v_glb
                g_img += w.beta_global * g_glb
            if w.beta_local > 0:
                renders = []
                for pid in sorted(cfg.weights.part_normal_weights):
                    part = ctx.part_meshes.get(pid)
                    if part is None:
                        continue
                    pr = render_normal_mask(part, camera)
                    renders.append((pid, pr.normal, pr.frame.covered))
                if renders:
                    v_loc, g_loc = loss_normal_local(entry.render.normal, renders,
                                                     cfg.weights.part_normal_weights)
                    components["normal_local"] = w.beta_local * v_loc
                    g_img += w.beta_local * g_loc
            if g_img.any():
                from .render import render_backward
                from .dmtet import evaluate_grid_backward, mt_backward
                g_pos = render_backward(entry.render, g_img, np.zeros_like(entry.render.mask))
                g_sdf, g_off = mt_backward(entry.prov, g_pos)
                grad += evaluate_grid_backward(entry.grid, params, g_sdf, g_off,
                                               tape=entry.grid_tape)

    v_glb, g_glb = sdf_loss_against_values(params, ctx.samples.points, ctx.template_values)
    grad += w.alpha_global * g_glb
    components["sdf_global"] = w.alpha_global * v_glb
    v_loc, g_loc = _local_loss(ctx, params)
    grad += w.alpha_local * g_loc
    components["sdf_local"] = w.alpha_local * v_loc

    adam.step(params.values, grad)
    _log(ctx, stage_name, **components)

    ctx.state.step = ctx.global_step
    if ctx.state.due_geometry_update(step + 1):
        evaluate_grid(ctx.grid, params)
        template_update_geometry(ctx.state, ctx.grid)
        if ctx.state.template_mesh.n_faces:
            _resample_constraints(ctx, ctx.state.template_mesh, seed_tag=step + 1)
            ctx.template_values = ctx.state.template_source.query(ctx.samples.points)


def stage_coarse(cfg: RunConfig, ctx: RunContext, params: FieldParams) -> FieldParams:
    """Global shaping under downscaled normal+mask guidance and SDF constraints."""
    ctx.grid = grid_init(cfg.grid.resolution)
    ctx.grid.close_boundary = True
    adam = Adam(lr=cfg.optimizer.lr_geometry, beta1=cfg.optimizer.beta1,
                beta2=cfg.optimizer.beta2, eps=cfg.optimizer.epsilon)
    for k in range(cfg.steps.coarse):
        _geometry_step(cfg, ctx, params, adam, STAGE_COARSE, "coarse", k,
                       cfg.steps.coarse, refine=False)
    return params


def stage_refine(cfg: RunConfig, ctx: RunContext, params: FieldParams) -> FieldParams:
    """One near-surface subdivision, then full-resolution guidance with
    global/local normal constraints added."""
    if ctx.grid is None:
        ctx.grid = grid_init(cfg.grid.resolution)
        ctx.grid.close_boundary = True
    evaluate_grid(ctx.grid, params)
    ctx.grid = subdivide_near_surface(ctx.grid, threshold=cfg.grid.subdivide_threshold,
                                      use_abs=cfg.grid.subdivide_use_abs)
    # refresh the template at the stage boundary so normal constraints compare
    # renders of the same tessellation family
    evaluate_grid(ctx.grid, params)
    template_update_geometry(ctx.state, ctx.grid)
    if ctx.state.template_mesh.n_faces:
        _resample_constraints(ctx, ctx.state.template_mesh, seed_tag=10 ** 6)
        ctx.template_values = ctx.state.template_source.query(ctx.samples.points)
    adam = Adam(lr=cfg.optimizer.lr_geometry, beta1=cfg.optimizer.beta1,
                beta2=cfg.optimizer.beta2, eps=cfg.optimizer.epsilon)
    for k in range(cfg.steps.refine):
        _geometry_step(cfg, ctx, params, adam, STAGE_REFINE, "refine", k,
                       cfg.steps.refine, refine=True)
    return params


def extract_final_mesh(cfg: RunConfig, ctx: RunContext, params: FieldParams) -> TriMesh:
    if ctx.grid is None:
        ctx.grid = grid_init(cfg.grid.resolution)
        ctx.grid.close_boundary = True
    evaluate_grid(ctx.grid, params)
    mesh, _ = marching_tetrahedra(ctx.grid)
    mesh = clean_mesh(mesh)
    if mesh.is_empty():
        raise NumericError("final geometry is empty")
    mesh.part_labels = _transfer_labels(ctx.prior_mesh, mesh.vertices)
    return mesh


def _transfer_labels(labeled: TriMesh, points: np.ndarray) -> np.ndarray:
    src = MeshSdf(labeled, assume_watertight=True)
    _, face, _, bary = src.unsigned(points)
    corner = np.argmax(bary, axis=1)
    verts = labeled.faces[face, corner]
    return labeled.part_labels[verts]


def _transfer_vertex_colors(src_mesh: TriMesh, colors: np.ndarray,
                            points: np.ndarray) -> np.ndarray:
    """Barycentric color lookup at the nearest surface point of the source."""
    src = MeshSdf(src_mesh, assume_watertight=True)
    _, face, _, bary = src.unsigned(points)
    return np.einsum("kc,kcj->kj", bary, np.asarray(colors)[src_mesh.faces[face]])


@dataclass
class AppearanceResult:
    params: FieldParams
    transform: ScalingTransform


def stage_appearance(cfg: RunConfig, ctx: RunContext, mesh: TriMesh) -> AppearanceResult:
    """PBR texture-field optimization on the frozen mesh under color guidance
    and the scheduled lightness constraint."""
    params = field_init(cfg.field_appearance.to_field_config(), seed=cfg.seed + 1)
    adam = Adam(lr=cfg.optimizer.lr_appearance, beta1=cfg.optimizer.beta1,
                beta2=cfg.optimizer.beta2, eps=cfg.optimizer.epsilon)
    _, transform = normalize_points_uniform(mesh.vertices)
    vn = compute_vertex_normals(mesh)
    attrs = np.concatenate([mesh.vertices, vn], axis=1)
    size = cfg.render.color_size
    div = max(cfg.output.lightness_scale_divisor, 1)
    lscale = (max(size // div, 1),) * 2
    w = cfg.weights
    backend = ctx.backend
    if (isinstance(backend, ReferenceMeshBackend) and backend.target is not mesh
            and backend.vertex_colors is not None):
        # color targets must live on the frozen mesh for pixel-aligned
        # guidance; transfer them from the target via nearest surface point
        backend = ReferenceMeshBackend(
            mesh, backend.config,
            vertex_colors=_transfer_vertex_colors(backend.target, backend.vertex_colors,
                                                  mesh.vertices))

    st = ctx.state
    for k in range(cfg.steps.appearance):
        camera = _pick_camera(ctx, STAGE_APPEARANCE, k, size)
        fb = rasterize(mesh, camera, attributes=attrs)
        cov = fb.covered
        pos = fb.channels["attr"][cov][:, 0:3]
        ng = fb.channels["attr"][cov][:, 3:6]
        ng = ng / np.maximum(np.linalg.norm(ng, axis=1, keepdims=True), 1e-12)
        pts01 = transform.apply(pos)
        raw, tape = field_eval_with_tape(params, pts01)
        mat = appearance_transform(raw)
        ns = compose_shading_normal(ng, mat.normal_delta)
        view = np.asarray(camera.position) - pos
        view = view / np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
        x_px = shade_pbr(mat.albedo, mat.roughness, mat.metalness, ns, view, ctx.light_rig)
        x_img = np.zeros((size, size, 3))
        x_img[cov] = x_px
        kd_img = np.zeros((size, size, 3))
        kd_img[cov] = mat.albedo

        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed, STAGE_APPEARANCE, k, 9])))
        kw = {"step": k} if isinstance(backend, ReferenceDirectoryBackend) else {}
        signal = backend.color_signal(x_img, camera, rng,
                                      progress=k / max(cfg.steps.appearance, 1), **kw)
        g_x = signal.gradient[cov]
        g_kd, g_rough, g_metal, g_ns = shade_pbr_backward(
            mat.albedo, mat.roughness, mat.metalness, ns, view, ctx.light_rig, g_x)

        components = {"sds": w.lambda_sds * signal.diagnostic}
        g_kd = w.lambda_sds * g_kd
        g_rough = w.lambda_sds * g_rough
        g_metal = w.lambda_sds * g_metal
        g_ns = w.lambda_sds * g_ns

        if st.lightness_active(k) and w.gamma_lightness > 0:
            tmpl_raw = field_eval(st.appearance_template, pts01)
            tmpl_kd_img = np.zeros((size, size, 3))
            tmpl_kd_img[cov] = appearance_transform(tmpl_raw).albedo
            v_l, g_l = loss_lightness(kd_img, tmpl_kd_img, lscale)
            components["lightness"] = w.gamma_lightness * v_l
            g_kd = g_kd + w.gamma_lightness * g_l[cov]
        else:
            components["lightness"] = 0.0

        g_delta = compose_shading_normal_backward(ng, mat.normal_delta, g_ns)
        g_raw = appearance_transform_backward(raw, g_kd, g_rough, g_metal, g_delta)
        g_params, _ = field_backward(params, pts01, g_raw, tape=tape)
        adam.step(params.values, g_params)
        _log(ctx, "appearance", **components)

        st.step = ctx.global_step
        if st.due_appearance_update(k + 1):
            template_update_appearance(st, params)
    return AppearanceResult(params=params, transform=transform)


def run_geometry(cfg: RunConfig, ctx: RunContext | None = None
                 ) -> tuple[FieldParams, TriMesh, RunContext]:
    ctx = ctx or prepare_run(cfg)
    params = stage_init(cfg, ctx)
    params = stage_coarse(cfg, ctx, params)
    params = stage_refine(cfg, ctx, params)
    mesh = extract_final_mesh(cfg, ctx, params)
    return params, mesh, ctx
