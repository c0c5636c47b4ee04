"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to, so command
handlers can translate failures uniformly.
"""


class Sar2EoError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(Sar2EoError):
    """Malformed input, violated precondition, or inconsistent configuration."""

    exit_code = 1


class MissingAssetError(Sar2EoError):
    """A required file (checkpoint, image, weights) does not exist."""

    exit_code = 2


class NumericalError(Sar2EoError):
    """A computation produced a non-finite value."""

    exit_code = 3
