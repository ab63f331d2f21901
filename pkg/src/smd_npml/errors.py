"""Exception hierarchy for smd_npml."""


class SmdNpmlError(Exception):
    """Base class for all package errors."""


class DomainError(SmdNpmlError, ValueError):
    """A point lies outside the closed interval of a function."""


class InvalidOrderError(SmdNpmlError, ValueError):
    """A smoothness order is outside the admissible range."""


class IntervalMismatchError(SmdNpmlError, ValueError):
    """Two objects that must share an interval do not."""


class NumericError(SmdNpmlError, ArithmeticError):
    """A non-finite or non-positive intermediate where one is not allowed."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (node {index})")
        self.index = index


class ProjectionError(SmdNpmlError):
    """Dykstra's algorithm did not converge within the sweep budget."""

    def __init__(self, message, residual):
        super().__init__(f"{message}; last residual {residual:.3e}")
        self.residual = residual


class GradientUndefinedError(SmdNpmlError, ArithmeticError):
    """The log-likelihood gradient does not exist at the given density."""


class OptimizerError(SmdNpmlError):
    """An optimizer hit a numeric failure it could not recover from."""


class PreconditionError(SmdNpmlError, ValueError):
    """An operation was called with arguments violating its precondition."""


class MechanismError(SmdNpmlError):
    """The inverse-CDF simulation mechanism could not bracket a root."""


class GuardError(SmdNpmlError):
    """The positivity guard on the data-side density estimate failed."""


class ScheduleError(SmdNpmlError, ValueError):
    """A simulation-size schedule exceeds the configured cap."""


class ConfigError(SmdNpmlError, ValueError):
    """An experiment configuration is malformed."""


class ReportError(SmdNpmlError, OSError):
    """A report could not be written to the requested location."""
