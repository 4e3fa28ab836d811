"""Exception classes shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user input: bad grid, inconsistent shapes, unvalidated model."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class UnsupportedError(ValueError):
    """Requested operation is outside the supported regime."""


class SolverError(RuntimeError):
    """A numerical procedure failed to produce an answer."""


class ConvergenceError(SolverError):
    """Iteration stopped without meeting its tolerance."""

    def __init__(self, message, residual_history=None, trace=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
        self.trace = list(trace or [])


class DivergenceError(SolverError):
    """State blew up (non-finite or above the divergence guard)."""

    def __init__(self, message, step=None, residual_history=None):
        super().__init__(message)
        self.step = step
        self.residual_history = list(residual_history or [])
