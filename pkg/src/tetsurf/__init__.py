"""Differentiable surface extraction on deformable tetrahedral grids.

Grids carry SDF values and clamped vertex offsets; marching tetrahedra turns
them into triangle meshes with exact vector-Jacobian products, so surface
losses can be pushed back onto the grid and optimized directly.
"""

from .fitting import FitConfig, FitError, fit, oracle_bench
from .losses import LossReport, LossWeights, PointSample, chamfer, sample_surface
from .marching import TriangleMesh, marching_cubes, marching_tetrahedra, marching_tetrahedra_vjp
from .sdfield import Box, MeshSdf, Sphere, Torus, mesh_sdf, parse_shape
from .subdivision import loop_subdivide, subdivide_volume
from .tetgrid import TetGrid, build_grid

__version__ = "0.1.0"

__all__ = [
    "Box",
    "FitConfig",
    "FitError",
    "LossReport",
    "LossWeights",
    "MeshSdf",
    "PointSample",
    "Sphere",
    "TetGrid",
    "Torus",
    "TriangleMesh",
    "build_grid",
    "chamfer",
    "fit",
    "loop_subdivide",
    "marching_cubes",
    "marching_tetrahedra",
    "marching_tetrahedra_vjp",
    "mesh_sdf",
    "oracle_bench",
    "parse_shape",
    "sample_surface",
    "subdivide_volume",
]
