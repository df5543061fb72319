"""Exception types shared across the package."""


class TrajDiTError(Exception):
    """Base class for all package errors."""


class ValidationError(TrajDiTError, ValueError):
    """Malformed input: bad shapes, out-of-range values, inconsistent configs."""


class DimensionError(ValidationError):
    """A tensor axis has an illegal size.

    ``axis`` names the offending axis (``"frames"``, ``"height"``, ...).
    """

    def __init__(self, axis, size, message):
        self.axis = axis
        self.size = size
        super().__init__(f"{axis} axis (size {size}): {message}")


class NonFiniteError(ValidationError):
    """Input contains NaN or infinity."""


class MissingDependencyError(TrajDiTError):
    """A prerequisite artifact (checkpoint, corpus) is missing."""
