"""Constraint losses (SDF, normal, lightness) and the evolving-template state.

All losses are means over their samples or pixels, with weights applied
outside, so the weight values stay resolution independent.  The sum form is
recovered by multiplying by the sample count.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .dmtet import TetGrid, marching_tetrahedra
from .errors import ContractError
from .fieldgrid import FieldParams, field_backward, field_eval_with_tape
from .render import downscale, downscale_backward
from .sdfkit import MeshSdf, PointSampleSet, SdfSource, TriMesh


@dataclass
class LossWeights:
    lambda_sds: float = 1.0
    alpha_global: float = 10.0
    alpha_local: float = 100.0
    beta_global: float = 1.0
    beta_local: float = 10.0
    part_weights: dict = field(default_factory=lambda: {1: 1.0, 2: 1.0, 3: 0.5})
    part_normal_weights: dict = field(default_factory=lambda: {1: 1.0})
    gamma_lightness: float = 10.0

    def __post_init__(self):
        vals = [self.lambda_sds, self.alpha_global, self.alpha_local,
                self.beta_global, self.beta_local, self.gamma_lightness,
                *self.part_weights.values(), *self.part_normal_weights.values()]
        arr = np.asarray(vals, dtype=np.float64)
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ContractError("loss weights must be nonnegative and finite")


def _world_to_field(points: np.ndarray) -> np.ndarray:
    """The optimization frame is [-1,1]^3; fields live on [0,1]^3."""
    return (np.asarray(points, dtype=np.float64) + 1.0) * 0.5


def sdf_loss_against_values(params: FieldParams, points: np.ndarray,
                            target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between the field SDF and precomputed targets."""
    pts = _world_to_field(points)
    out, tape = field_eval_with_tape(params, pts)
    diff = out[:, 0] - target
    value = float(np.mean(diff ** 2))
    gout = np.zeros_like(out)
    gout[:, 0] = 2.0 * diff / diff.size
    grad, _ = field_backward(params, pts, gout, tape=tape)
    return value, grad


def loss_sdf_init(params: FieldParams, prior: SdfSource,
                  samples: PointSampleSet) -> tuple[float, np.ndarray]:
    """Alignment loss against the static prior SDF."""
    return sdf_loss_against_values(params, samples.points, prior.query(samples.points))


def loss_sdf_global(params: FieldParams, template: SdfSource,
                    samples: PointSampleSet) -> tuple[float, np.ndarray]:
    """Same form as loss_sdf_init with the evolving template as target."""
    return sdf_loss_against_values(params, samples.points, template.query(samples.points))


def loss_sdf_local(params: FieldParams, prior: SdfSource,
                   part_samples: list[PointSampleSet],
                   part_weights: dict) -> tuple[float, np.ndarray]:
    """Weighted per-part alignment against the static prior (never the template)."""
    total = 0.0
    grad = np.zeros_like(params.values)
    for q in part_samples:
        if q.part_id is None or q.part_id not in part_weights:
            raise ContractError(f"no weight for part {q.part_id!r}")
        w = part_weights[q.part_id]
        if w == 0.0:
            continue
        v, g = sdf_loss_against_values(params, q.points, prior.query(q.points))
        total += w * v
        grad += w * g
    return total, grad


def _foreground_union(n_cur: np.ndarray, n_ref: np.ndarray) -> np.ndarray:
    """Pixels covered in either image; background carries the zero normal."""
    return (np.linalg.norm(n_cur, axis=2) > 1e-9) | (np.linalg.norm(n_ref, axis=2) > 1e-9)


def loss_normal_global(n_cur: np.ndarray, n_tmp: np.ndarray,
                       mask_to_foreground: bool = True) -> tuple[float, np.ndarray]:
    """Mean squared per-pixel normal difference over the covered-pixel union."""
    if n_cur.shape != n_tmp.shape:
        raise ContractError(f"shape mismatch {n_cur.shape} vs {n_tmp.shape}")
    if mask_to_foreground:
        m = _foreground_union(n_cur, n_tmp)
    else:
        m = np.ones(n_cur.shape[:2], dtype=bool)
    k = max(int(m.sum()), 1)
    diff = (n_cur - n_tmp) * m[:, :, None]
    value = float(np.sum(diff ** 2) / k)
    return value, 2.0 * diff / k


def loss_normal_local(n_cur: np.ndarray,
                      prior_part_renders: list[tuple[int, np.ndarray, np.ndarray]],
                      part_normal_weights: dict) -> tuple[float, np.ndarray]:
    """Weighted masked normal losses against per-part prior renders.

    Each entry is (part_id, normal_image, coverage_mask); the loss for a part
    is restricted to pixels its render covers.
    """
    value = 0.0
    grad = np.zeros_like(n_cur)
    for part_id, n_ref, cover in prior_part_renders:
        if part_id not in part_normal_weights:
            raise ContractError(f"no normal weight for part {part_id!r}")
        w = part_normal_weights[part_id]
        if w == 0.0:
            continue
        if n_ref.shape != n_cur.shape:
            raise ContractError("part render shape mismatch")
        m = cover.astype(bool)
        if m.ndim == 3:
            m = m[:, :, 0]
        k = int(m.sum())
        if k == 0:
            continue
        diff = (n_cur - n_ref) * m[:, :, None]
        value += w * float(np.sum(diff ** 2) / k)
        grad += w * 2.0 * diff / k
    return value, grad


def total_geometry_loss(weights: LossWeights,
                        sds: tuple[float, np.ndarray],
                        sdf_global: tuple[float, np.ndarray],
                        sdf_local: tuple[float, np.ndarray],
                        normal_global: tuple[float, np.ndarray] | None = None,
                        normal_local: tuple[float, np.ndarray] | None = None,
                        ) -> tuple[float, np.ndarray]:
    """Weighted sum of geometry loss components; gradients add in place."""
    zero = (0.0, 0.0)
    terms = [
        (weights.lambda_sds, sds),
        (weights.alpha_global, sdf_global),
        (weights.alpha_local, sdf_local),
        (weights.beta_global, normal_global or zero),
        (weights.beta_local, normal_local or zero),
    ]
    value = 0.0
    grad = None
    for w, (v, g) in terms:
        value += w * v
        if w != 0.0 and isinstance(g, np.ndarray):
            grad = w * g if grad is None else grad + w * g
    return value, grad if grad is not None else np.zeros(1)


# ---------------------------------------------------------------------------
# Lightness constraint

def luma(image: np.ndarray) -> np.ndarray:
    """Per-pixel channel mean of an RGB image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"luma expects an (H,W,3) image, got {img.shape}")
    return img.mean(axis=2)


def loss_lightness(kd_cur: np.ndarray, kd_tmp: np.ndarray,
                   scale_target: tuple[int, int]) -> tuple[float, np.ndarray]:
    """Mean squared difference of box-downscaled lumas; gradient on kd_cur."""
    if kd_cur.shape != kd_tmp.shape:
        raise ContractError(f"shape mismatch {kd_cur.shape} vs {kd_tmp.shape}")
    yc = downscale(luma(kd_cur), scale_target)
    yt = downscale(luma(kd_tmp), scale_target)
    diff = yc - yt
    value = float(np.mean(diff ** 2))
    g_small = 2.0 * diff / diff.size
    g_full = downscale_backward(g_small, kd_cur.shape[:2])
    return value, np.repeat(g_full[:, :, None] / 3.0, 3, axis=2)


# ---------------------------------------------------------------------------
# Evolving template state

@dataclass
class TemplateState:
    prior_source: SdfSource                 # static f_0, never replaced
    prior_mesh: TriMesh                     # labeled prior, for part renders
    template_mesh: TriMesh                  # current f_tmp geometry snapshot
    template_source: SdfSource              # queryable f_tmp
    geometry_interval: int = 5000           # update every this many steps
    appearance_interval: int = 200
    appearance_init_step: int = 400
    appearance_template: FieldParams | None = None
    step: int = 0
    geometry_updates: list = field(default_factory=list)
    appearance_updates: list = field(default_factory=list)

    def __post_init__(self):
        if self.geometry_interval < 1 or self.appearance_interval < 1:
            raise ContractError("template intervals must be >= 1")

    @classmethod
    def from_prior(cls, prior_source: SdfSource, prior_mesh: TriMesh, **kw) -> "TemplateState":
        """Template initialized to the prior: f_tmp == f_0 until the first update."""
        return cls(prior_source=prior_source, prior_mesh=prior_mesh,
                   template_mesh=prior_mesh, template_source=prior_source, **kw)

    def due_geometry_update(self, step: int) -> bool:
        return step > 0 and step % self.geometry_interval == 0

    def due_appearance_update(self, step: int) -> bool:
        return step >= self.appearance_init_step and (
            (step - self.appearance_init_step) % self.appearance_interval == 0)

    def lightness_active(self, step: int) -> bool:
        return self.appearance_template is not None and step >= self.appearance_init_step


def template_update_geometry(state: TemplateState, grid: TetGrid) -> TemplateState:
    """Freeze the current extracted surface as the new f_tmp.

    The static prior f_0 is untouched.  An empty extraction keeps the old
    template and warns.
    """
    mesh, _ = marching_tetrahedra(grid)
    if mesh.is_empty():
        warnings.warn("template update skipped: extracted mesh is empty",
                      RuntimeWarning, stacklevel=2)
        return state
    state.template_mesh = mesh
    state.template_source = MeshSdf(mesh)
    state.geometry_updates.append(state.step)
    return state


def template_update_appearance(state: TemplateState, current: FieldParams) -> TemplateState:
    """Deep-copy the appearance parameters into the frozen template slot."""
    state.appearance_template = current.copy()
    state.appearance_updates.append(state.step)
    return state
