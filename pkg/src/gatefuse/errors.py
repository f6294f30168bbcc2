"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric aborts exit 3.
"""


class GatefuseError(Exception):
    """Base class for all package errors."""


class InvalidArgument(GatefuseError, ValueError):
    """A caller violated an operation precondition (bad shape, bad key, bad value)."""


class DataFormatError(GatefuseError):
    """A data file is missing, truncated, or malformed."""


class NumericError(GatefuseError):
    """A numeric invariant was violated (NaN/Inf where finite values are required)."""
