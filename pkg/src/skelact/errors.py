"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: validation problems
exit 1, numerical failures exit 2, I/O errors exit 3.
"""


class SkelactError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SkelactError, ValueError):
    """Rejected input, configuration, or file content."""


class NumericalError(SkelactError, ArithmeticError):
    """Non-finite values or an aborted numerical operation."""
