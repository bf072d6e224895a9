"""Exception hierarchy shared by every solver module."""


class ConfigurationError(ValueError):
    """Inconsistent shapes, invalid parameters, malformed configs."""


class PreconditionError(ValueError):
    """An operation was called on inputs that violate its contract."""


class NumericalError(RuntimeError):
    """A linear solve or recursion broke down."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(NumericalError):
    def __init__(self, message, path=None, step=None):
        super().__init__(message, step=step)
        self.path = path


class StallError(RuntimeError):
    """Armijo backtracking failed to find a decrease; the partial trace is attached."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
