class CrwkvError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CrwkvError, ValueError):
    """Shapes, axes or parameter widths that do not line up."""


class NumericError(CrwkvError, ArithmeticError):
    """A NaN or Inf surfaced where finite values were required."""


class DetachedError(CrwkvError, RuntimeError):
    """Backward was requested from a tensor that is not on an active tape."""


class ConfigError(CrwkvError, ValueError):
    """Invalid model, training or CLI configuration."""


class ValidationError(CrwkvError, ValueError):
    """Input data that violates a documented precondition."""
