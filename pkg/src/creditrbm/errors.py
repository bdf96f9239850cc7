"""Exception types shared across the package.

The CLI maps ``NumericalError`` subclasses to exit code 4 and every other
``CreditRbmError`` to exit code 3.
"""


class CreditRbmError(Exception):
    """Base class for all package errors."""


class DataError(CreditRbmError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(DataError):
    """Array shapes do not agree with the model dimensions."""


class OracleTooLargeError(CreditRbmError, ValueError):
    """Exact enumeration requested on a model that is too large."""


class InsufficientTailDepthError(CreditRbmError, ValueError):
    """A requested quantile lies beyond what a tail curve can resolve."""

    def __init__(self, message, deepest_level):
        super().__init__(message)
        self.deepest_level = deepest_level


class NumericalError(CreditRbmError, ArithmeticError):
    """A numerical procedure failed (divergence, non-convergence, overflow)."""


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch):
        super().__init__(f"non-finite parameters after epoch {epoch}")
        self.epoch = epoch


class ConvergenceError(NumericalError):
    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class TargetUnreachableError(NumericalError):
    def __init__(self, target, attained):
        super().__init__(
            f"target mean loss {target:.6g} unreachable; attained {attained:.6g} at t_max"
        )
        self.target = target
        self.attained = attained
