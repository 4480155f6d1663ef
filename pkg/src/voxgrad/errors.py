"""Exception types raised across the package."""


class VoxgradError(Exception):
    """Base class for all package errors."""


class QueryOutsideGrid(VoxgradError, ValueError):
    pass


class GridTooSmall(VoxgradError, ValueError):
    pass


class InvalidResolution(VoxgradError, ValueError):
    pass


class NoIntersection(VoxgradError, ValueError):
    pass


class ShapeMismatch(VoxgradError, ValueError):
    pass


class FaceOnBoundary(VoxgradError, ValueError):
    pass


class EmptyMesh(VoxgradError, ValueError):
    pass


class EmptySet(VoxgradError, ValueError):
    pass


class NumericFailure(VoxgradError, ArithmeticError):
    """Training produced non-finite values."""
