"""Procedural labeled figure meshes used as the human-prior stand-in.

A capsule-and-sphere figure with integer part labels (0 body, 1 head, 2
hands, 3 feet) provides everything the local constraints and part-centered
cameras need, without any licensed body model.  Variants with modified
proportions serve as optimization targets in tests and experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dmtet import grid_init, marching_tetrahedra
from .sdfkit import Box, Capsule, SdfSource, Sphere, TriMesh, Union

PART_BODY = 0
PART_HEAD = 1
PART_HAND = 2
PART_FOOT = 3


@dataclass(frozen=True)
class FigureSpec:
    torso_radius: float = 0.22
    torso_top: float = 0.35
    torso_bottom: float = -0.25
    head_radius: float = 0.16
    head_center_y: float = 0.58
    head_squash: float = 1.0        # < 1 flattens the head vertically
    arm_radius: float = 0.07
    hand_radius: float = 0.09
    leg_radius: float = 0.085
    foot_half: tuple[float, float, float] = (0.09, 0.045, 0.14)
    torso_shift_x: float = 0.0      # lateral torso displacement (targets)


def _part_sources(spec: FigureSpec) -> dict[int, SdfSource]:
    sx = spec.torso_shift_x
    body = Union([
        Capsule((sx, spec.torso_bottom, 0.0), (sx, spec.torso_top, 0.0), spec.torso_radius),
        Capsule((0.24, 0.30, 0.0), (0.52, -0.05, 0.0), spec.arm_radius),
        Capsule((-0.24, 0.30, 0.0), (-0.52, -0.05, 0.0), spec.arm_radius),
        Capsule((0.11, -0.30, 0.0), (0.13, -0.78, 0.0), spec.leg_radius),
        Capsule((-0.11, -0.30, 0.0), (-0.13, -0.78, 0.0), spec.leg_radius),
    ])
    if spec.head_squash == 1.0:
        head: SdfSource = Sphere((0.0, spec.head_center_y, 0.0), spec.head_radius)
    else:
        from .sdfkit import Ellipsoid
        head = Ellipsoid((0.0, spec.head_center_y, 0.0),
                         (spec.head_radius, spec.head_radius * spec.head_squash,
                          spec.head_radius))
    hands = Union([Sphere((0.56, -0.12, 0.0), spec.hand_radius),
                   Sphere((-0.56, -0.12, 0.0), spec.hand_radius)])
    feet = Union([Box((0.14, -0.85, 0.04), spec.foot_half),
                  Box((-0.14, -0.85, 0.04), spec.foot_half)])
    return {PART_BODY: body, PART_HEAD: head, PART_HAND: hands, PART_FOOT: feet}


def figure_source(spec: FigureSpec = FigureSpec()) -> SdfSource:
    """Analytic SDF of the whole figure (union of all labeled parts)."""
    return Union(list(_part_sources(spec).values()))


def label_points(points: np.ndarray, spec: FigureSpec = FigureSpec()) -> np.ndarray:
    """Part label per point: argmin of signed part distances, so containment
    wins over mere surface proximity where parts overlap."""
    parts = _part_sources(spec)
    labels = sorted(parts)
    d = np.stack([parts[k].query(points) for k in labels], axis=1)
    return np.asarray(labels, dtype=np.int64)[np.argmin(d, axis=1)]


def build_figure(spec: FigureSpec = FigureSpec(), resolution: int = 48
                 ) -> tuple[TriMesh, SdfSource]:
    """Labeled figure mesh (marching tetrahedra over the analytic SDF) and
    the analytic source itself as f_0."""
    source = figure_source(spec)
    grid = grid_init(resolution)
    grid.sdf = source.query(grid.vertices)
    grid.offsets = np.zeros_like(grid.vertices)
    mesh, _ = marching_tetrahedra(grid)
    mesh.part_labels = label_points(mesh.vertices, spec)
    return mesh, source


def part_anchors(mesh: TriMesh) -> dict[int, np.ndarray]:
    """Label-region centroids for part-centered camera targets."""
    if mesh.part_labels is None:
        return {}
    out = {}
    for lab in np.unique(mesh.part_labels):
        out[int(lab)] = mesh.vertices[mesh.part_labels == lab].mean(axis=0)
    return out


# Named presets used by config files and tests.
FIGURE_PRESETS = {
    "default": FigureSpec(),
    "wide_torso": FigureSpec(torso_radius=0.31),
    "narrow_torso": FigureSpec(torso_radius=0.15),
    "shifted_torso": FigureSpec(torso_shift_x=0.12),
    "flat_head_wide_torso": FigureSpec(torso_radius=0.31, head_squash=0.45),
}
