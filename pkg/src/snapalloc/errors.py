"""Exception types raised across the package."""


class SnapAllocError(Exception):
    """Base class for all package errors."""


class InvalidAllocationError(SnapAllocError, ValueError):
    """A time allocation has non-positive or inconsistent durations."""


class DimensionError(SnapAllocError, ValueError):
    """Array lengths or shapes do not agree."""


class DegenerateSegmentError(SnapAllocError, ValueError):
    """A waypoint path contains a zero-length segment."""


class OutOfRangeError(SnapAllocError, ValueError):
    """A query time lies outside the trajectory's time span."""


class SolverSingularError(SnapAllocError, RuntimeError):
    """The KKT system could not be solved to tolerance."""

    def __init__(self, message: str, rcond: float):
        super().__init__(f"{message} (reciprocal condition estimate {rcond:.3e})")
        self.rcond = rcond


class BracketFailureError(SnapAllocError, RuntimeError):
    """Total-time scaling found no feasible scale inside the bracket."""


class DuplicateOutputError(SnapAllocError, ValueError):
    """Collocation produced coincident consecutive points."""


class DegenerateOutputError(SnapAllocError, ValueError):
    """A raw model output cannot be normalised (all entries non-positive)."""


class SequenceLengthError(SnapAllocError, ValueError):
    """An input sequence exceeds the model's maximum length."""


class NumericFailureError(SnapAllocError, FloatingPointError):
    """Non-finite activations or losses."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} [{layer}]")
        self.layer = layer


class FixedSizeError(SnapAllocError, ValueError):
    """A fixed-size model received an input of a different size."""


class ConfigMismatchError(SnapAllocError, ValueError):
    """A checkpoint's configuration does not match the requested run."""
