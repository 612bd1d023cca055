"""evotet: constrained implicit-surface optimization on tetrahedral grids.

Geometry lives in a multi-resolution hash-grid SDF field driven through
differentiable marching tetrahedra; appearance in a second field feeding a
PBR software rasterizer.  Both are optimized under self-evolving template
constraints with a pluggable guidance oracle standing in for a diffusion
score model.
"""

__version__ = "0.1.0"
