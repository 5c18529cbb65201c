"""Exception hierarchy shared across the package."""


class P2innError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(P2innError, ValueError):
    """Inconsistent shapes, unknown names, or settings that cannot work."""


class UsageError(P2innError, RuntimeError):
    """An API was called in the wrong state (e.g. backward on an empty tape)."""


class SolverStateError(P2innError, ArithmeticError):
    """The ground-truth solver was handed a state outside its valid domain."""


class NumericError(P2innError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class DivergenceError(P2innError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, breakdown=None):
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown


class CheckpointError(P2innError, ValueError):
    """Base class for checkpoint load failures."""


class CheckpointParseError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass
