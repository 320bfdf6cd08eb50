"""Exception types shared across the package."""


class CompsetError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(CompsetError):
    """An argument violates a documented precondition."""


class DegenerateInput(CompsetError):
    """Structurally valid input that is numerically unusable (zero rows, d < 2)."""


class DegenerateSet(CompsetError):
    """A patch or primitive set whose rows all center to zero, so the
    set similarity is undefined."""

    def __init__(self, message: str, class_id: int | None = None):
        super().__init__(message)
        self.class_id = class_id


class NumericalFailure(CompsetError):
    """A numeric routine produced a non-finite value."""


class InsufficientData(CompsetError):
    """Too few samples or patches for the requested operation."""


class TensorFormatError(CompsetError):
    """Base class for tensor-container violations."""


class BadMagic(TensorFormatError):
    """File does not start with the container magic."""


class BadVersion(TensorFormatError):
    """Unsupported container version."""


class UnknownDtype(TensorFormatError):
    """Dtype code not in the container's registry."""


class TruncatedPayload(TensorFormatError):
    """Header and payload lengths disagree."""
