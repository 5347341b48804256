"""Exception hierarchy shared across the pipeline.

The CLI maps these to exit codes: :class:`DataError` -> 3,
:class:`InvariantViolation` -> 4.
"""


class GetNetError(Exception):
    """Base class for all pipeline errors."""

    category = "internal"


class DataError(GetNetError, ValueError):
    """Input data is malformed or unusable."""

    category = "data"


class ClipTooShortError(DataError):
    """Clip has fewer samples than one analysis window."""

    category = "empty_result"


class StratificationError(DataError):
    category = "stratification"


class DegenerateMetricError(DataError):
    """Metric is undefined for the given labels (e.g. no positives for AP)."""

    category = "degenerate_metric"


class CheckpointError(DataError):
    category = "checkpoint"


class CorruptCheckpointError(CheckpointError):
    category = "checkpoint_corrupt"


class ShapeMismatchError(CheckpointError):
    category = "shape_mismatch"


class InvariantViolation(GetNetError):
    """An internal guarantee was broken; never expected on valid input."""

    category = "invariant"


class LeakageError(InvariantViolation):
    """Training, validation and test instance ids overlap."""

    category = "leakage"


class FoldFailure(GetNetError):
    """An inner fold failed; the whole outer block is aborted."""

    category = "fold_failure"

    def __init__(self, outer: int, inner: int, cause: BaseException):
        super().__init__(f"fold ({outer}, {inner}) failed: {cause!r}")
        self.outer = outer
        self.inner = inner
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.outer, self.inner, self.cause)
