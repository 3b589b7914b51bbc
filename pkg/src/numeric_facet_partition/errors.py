"""
Exception hierarchy for numeric facet partitioning.

Anything raised on purpose by the package derives from FacetPartitionError, so the
CLI can tell a bad input (exit code 1) from an internal failure (exit code 2).
"""

from typing import Optional


class FacetPartitionError(Exception):
    """Base class for all errors raised on purpose by this package."""


class LogFormatError(FacetPartitionError, ValueError):
    """A log line could not be decoded."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class LogValidationError(FacetPartitionError, ValueError):
    """A decoded impression violates the log invariants."""

    def __init__(self, message: str, query_id: Optional[str] = None, line_number: Optional[int] = None):
        self.query_id = query_id
        self.line_number = line_number
        prefix = []
        if line_number is not None:
            prefix.append(f"line {line_number}")
        if query_id is not None:
            prefix.append(f"query_id={query_id!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class EmptyLogError(FacetPartitionError, ValueError):
    """No usable impressions."""


class MissingValueError(FacetPartitionError, ValueError):
    """The clicked entity has no facet value."""


class ConfigError(FacetPartitionError, ValueError):
    """Invalid experiment, generator, or optimizer configuration."""


class InfeasibleError(FacetPartitionError):
    """The requested enumeration is too large (or k is out of the tractable range)."""


class DimensionMismatchError(FacetPartitionError, ValueError):
    """Feature vector length does not match the model."""


class SplitMismatchError(FacetPartitionError, ValueError):
    """Runs being compared were not evaluated on the same test split."""
