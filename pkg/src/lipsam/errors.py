"""Shared exception types.

Error classes are deliberately coarse: each names a contract violation that
callers may want to catch, not an implementation detail.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes, lengths, or sample rates."""


class InvalidWindowError(ValueError):
    """A window prototype cannot be normalized into a tight analysis window."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. zero reference)."""


class UncertifiedError(RuntimeError):
    """A Lipschitz certificate was required but is missing."""


class UnboundedModifierError(RuntimeError):
    """No finite Lipschitz bound exists for the requested architecture."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity poisoned a value that must stay finite."""


class FormatError(ValueError):
    """A serialized blob is corrupt, truncated, or of an unknown version."""


class ConfigError(ValueError):
    """A configuration document failed schema validation."""
