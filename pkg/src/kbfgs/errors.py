"""Exception hierarchy shared by all kbfgs modules."""


class KbfgsError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(KbfgsError, ValueError):
    pass


class EmptyBatchError(KbfgsError, ValueError):
    pass


class NotPositiveDefiniteError(KbfgsError, ArithmeticError):
    pass


class NotSymmetricError(KbfgsError, ValueError):
    pass


class CurvatureConditionError(KbfgsError, ArithmeticError):
    """Raised when a quasi-Newton pair violates ``s^T y > 0``."""


class DegeneratePairError(KbfgsError, ArithmeticError):
    """Raised by the damping routines on a zero ``y`` or zero damped ``s``."""


class NumericalDivergenceError(KbfgsError, ArithmeticError):
    """A forward pass produced a non-finite value.

    ``layer`` is the 1-based index of the first offending layer (0 for the
    loss itself).
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class FormatError(KbfgsError, ValueError):
    pass


class ConfigError(KbfgsError, ValueError):
    pass
