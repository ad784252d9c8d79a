"""Exception hierarchy shared by every part of the lab."""


class LosiaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LosiaError, ValueError):
    pass


class ConfigError(LosiaError, ValueError):
    pass


class StateError(LosiaError, RuntimeError):
    pass


class SizeError(LosiaError, ValueError):
    """Raised when an exhaustive search would exceed its enumeration guard."""


class UndefinedMetricError(LosiaError, ValueError):
    pass


class NumericError(LosiaError, ArithmeticError):
    """A non-finite value appeared during training.

    ``step`` is the global step index at which it was detected (or None when
    the caller did not provide one).
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NumericOverflowError(NumericError):
    pass
