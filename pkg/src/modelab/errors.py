"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ConfigurationError(ValueError):
    """A configuration value or combination of values is invalid.

    ``key`` names the offending config entry when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class SingularityError(ArithmeticError):
    """A normalization denominator is exactly zero."""
