"""Exception types shared across the package."""


class SmoeEdgeError(Exception):
    """Base class for all package errors."""


class ShapeError(SmoeEdgeError):
    """Tensor shapes are incompatible with the requested operation."""


class GraphError(SmoeEdgeError):
    """Misuse of the autodiff graph (e.g. a second backward pass)."""


class DataError(SmoeEdgeError):
    """Dataset or artifact files are missing, unreadable or inconsistent."""


class NumericError(SmoeEdgeError):
    """A non-finite value surfaced where finite math was required."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt, truncated or incompatible."""
