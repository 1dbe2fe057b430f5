"""Shared exception types for the toolkit.

CLI exit-code mapping: usage errors -> 1, data/format errors -> 2,
numeric failures -> 3.
"""


class DimensionError(ValueError):
    """Tensor/image shapes are inconsistent for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(ValueError):
    """An augmentation or config parameter is outside its legal range."""


class FormatError(ValueError):
    """A serialized artifact (snapshot, dataset file, manifest) is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A serialized artifact has an unsupported version tag."""


class NumericError(ArithmeticError):
    """A numeric invariant failed (non-finite values, diverging loss)."""


class CalibrationError(RuntimeError):
    """Strength calibration could not bracket or converge on the target."""
