"""Exception types shared across the package.

Each class maps to one failure contract: callers can catch the base class,
the CLI maps any of them to a nonzero exit status.
"""


class SparseMatchError(Exception):
    """Base class for all package errors."""


class DimensionError(SparseMatchError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SparseMatchError):
    """A documented precondition or API contract was violated."""


class InputError(SparseMatchError):
    """User-supplied data (keypoints, paths, configs) is invalid."""


class FormatError(SparseMatchError):
    """A binary or text file does not conform to its documented format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ResourceError(SparseMatchError):
    """A run would exceed a configured resource budget."""


class NumericError(SparseMatchError):
    """Non-finite or otherwise unusable numeric values were encountered."""
