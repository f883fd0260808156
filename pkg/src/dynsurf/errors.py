"""Exception types shared across the package."""
from __future__ import annotations


class DynsurfError(Exception):
    """Base class for all package-specific errors."""


class AmbiguousRotationError(DynsurfError, ValueError):
    """Rotation angle is within tolerance of pi; the axis is not recoverable.

    Callers holding a trajectory must subdivide the interval with an extra
    keyframe instead of guessing an axis.
    """


class TrajectoryCoverageError(DynsurfError, ValueError):
    """A pose was requested outside the time span covered by keyframes."""


class SkipObject(DynsurfError):
    """An object has too few points to be optimized safely and is skipped."""


class DivergedRegistration(DynsurfError):
    """ICP found no correspondences within the matching threshold."""


class ConvergenceFailure(DynsurfError):
    """The optimizer could not produce a usable result for any object."""


class DataFormatError(DynsurfError, ValueError):
    """A dataset file failed validation.

    Carries the offending file, the byte offset where the problem was
    detected, and what was expected there.
    """

    def __init__(self, path, offset: int, expected: str):
        self.path = str(path)
        self.offset = offset
        self.expected = expected
        super().__init__(f"{self.path} @ byte {offset}: expected {expected}")


class EmptyMeshError(DynsurfError, ValueError):
    """A query was issued against a mesh with no triangles."""
