"""Error hierarchy shared by every stage; each class maps to a CLI exit code."""
from __future__ import annotations


class GsmcError(RuntimeError):
    """Base class for all toolkit failures."""

    exit_code = 1


class SchemaError(GsmcError):
    """Raised when a point file does not declare the expected layout."""

    exit_code = 3


class DataError(GsmcError):
    """Raised when attribute values are unusable (NaN/Inf, too few rows)."""

    exit_code = 4


class InsufficientDataError(DataError):
    pass


class ConfigError(GsmcError, ValueError):
    """Raised for invalid parameters (k, block sizes, qp, templates)."""

    exit_code = 5


class RangeError(ConfigError):
    pass


class ShapeError(ConfigError):
    pass


class BackendError(GsmcError):
    """Raised when an external codec command fails."""

    exit_code = 6


class ContainerError(GsmcError):
    """Raised for malformed or inconsistent containers."""

    exit_code = 7


class FormatError(ContainerError):
    pass


class CorruptionError(ContainerError):
    pass


class IntegrityError(GsmcError):
    """Raised when a lossless image does not survive its own decode check."""

    exit_code = 8
