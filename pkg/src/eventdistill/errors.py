"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation failures
(ParameterError, DimensionError, FormatError) exit 1, I/O errors exit 2,
and NumericError exits 3.
"""


class EventDistillError(Exception):
    """Base class for all package errors."""


class ParameterError(EventDistillError, ValueError):
    """An argument value is out of range or otherwise invalid."""


class DimensionError(EventDistillError, ValueError):
    """Array shapes or sensor geometry do not line up."""


class FormatError(EventDistillError, ValueError):
    """A file is malformed, truncated, or carries the wrong magic."""


class NumericError(EventDistillError, ArithmeticError):
    """A non-finite value appeared where the pipeline requires finite math."""
