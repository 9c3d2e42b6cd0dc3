"""Exception taxonomy shared by the whole package.

The CLI maps these onto exit codes: ConfigError and ShapeError are usage
errors (2), FormatError covers bad or truncated files (3), NumericError
covers non-finite values (4).
"""


class MetaRegError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaRegError):
    """Array dimensions are incompatible with the operation."""


class ConfigError(MetaRegError):
    """Invalid configuration value, unknown key, or infeasible request."""


class FormatError(MetaRegError):
    """Malformed file: bad magic, unknown version, or truncated data."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(MetaRegError):
    """Non-finite value where a finite one is required."""


class StateError(MetaRegError):
    """Stale or mismatched cached state."""
