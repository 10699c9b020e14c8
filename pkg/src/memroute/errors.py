"""Exception types raised across the package."""


class MemrouteError(Exception):
    """Base class for all package errors."""


class ShapeError(MemrouteError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MemrouteError, ValueError):
    """A configuration value or hyperparameter is invalid."""


class NonFiniteError(MemrouteError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphError(MemrouteError, RuntimeError):
    """The autodiff graph cannot be traversed as requested."""


class FormatError(MemrouteError, ValueError):
    """A file does not match its declared binary format."""
