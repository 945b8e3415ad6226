"""Shared exception types.

ConfigError maps to CLI exit code 1, ArchiveError to exit code 2.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericGuardError(ValueError):
    """A numeric precondition (e.g. nonzero norm) was violated."""


class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class ArchiveError(RuntimeError):
    """Malformed, truncated, or mismatching tensor archive."""
