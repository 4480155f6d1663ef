"""Dense-grid SDF surface reconstruction with interpolated gradients."""

from voxgrad.errors import (
    EmptyMesh,
    EmptySet,
    FaceOnBoundary,
    GridTooSmall,
    InvalidResolution,
    NoIntersection,
    QueryOutsideGrid,
    ShapeMismatch,
    VoxgradError,
)
from voxgrad.sdf_grid import SdfGrid

__version__ = "0.1.0"

__all__ = [
    "EmptyMesh",
    "EmptySet",
    "FaceOnBoundary",
    "GridTooSmall",
    "InvalidResolution",
    "NoIntersection",
    "QueryOutsideGrid",
    "SdfGrid",
    "ShapeMismatch",
    "VoxgradError",
]
