"""Exception hierarchy shared by every patconv module."""


class PatConvError(Exception):
    """Base class for all library errors."""


class ShapeError(PatConvError, ValueError):
    """Tensor, layer or ConvSpec dimensions do not compose."""


class DataError(PatConvError, ValueError):
    """Numeric payload is unusable (NaN/inf where finite values are required)."""


class DomainError(PatConvError, ValueError):
    """A parameter lies outside the mathematical domain of an operation."""


class ValidationError(PatConvError, ValueError):
    """A model or layer violates one of its structural invariants."""


class FormatError(PatConvError, ValueError):
    """A serialized artifact is malformed.

    ``offset`` is the byte offset where the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlanMismatchError(PatConvError, ValueError):
    """An execution plan was applied to a layer or model it was not compiled from."""


class TrainingError(PatConvError, RuntimeError):
    """Training diverged; ``diagnostics`` carries the last observed state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
