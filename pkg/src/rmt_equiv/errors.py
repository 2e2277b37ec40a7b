"""Exception hierarchy shared by all modules."""


class RmtError(Exception):
    """Base class for every error raised by this package."""


class ModelError(RmtError, ValueError):
    """Invalid data model or model file."""

    def __init__(self, message, column=None, field=None):
        super().__init__(message)
        self.column = column
        self.field = field


class DomainError(RmtError, ValueError):
    """An argument or iterate left the admissible domain."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(RmtError, RuntimeError):
    """A fixed-point iteration did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None, last=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.last = last


class ConditioningError(RmtError, ArithmeticError):
    """A linear system is singular or too badly conditioned."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ContractionError(RmtError, ValueError):
    """A contraction precondition does not hold."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class EstimationError(RmtError, RuntimeError):
    """A Monte-Carlo estimate or statistical fit could not be formed."""
