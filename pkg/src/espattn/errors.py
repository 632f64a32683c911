"""Exception types shared across the package."""


class EspError(Exception):
    """Base class for all errors raised by espattn."""


class ShapeError(EspError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(EspError, ValueError):
    """A hyperparameter is outside its valid range."""


class SizeError(EspError, ValueError):
    """Problem too large for an exhaustive routine."""


class UnsupportedModeError(EspError):
    """Operation is not defined for the requested sort mode."""


class NonFiniteError(EspError, FloatingPointError):
    """A NaN or Inf was produced where finite values are required."""


class DivergenceError(EspError):
    """Training produced a non-finite loss."""
