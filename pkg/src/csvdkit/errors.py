"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.EXIT_CODES).
"""


class CsvdkitError(Exception):
    """Base class for all package-specific errors."""


class DataError(CsvdkitError):
    """Malformed, ragged, or non-finite input data."""


class NumericError(CsvdkitError):
    """A numeric routine failed or produced values outside tolerance."""


class FormatError(CsvdkitError):
    """A binary container is corrupt, truncated, or version-mismatched."""
