"""Exception types raised by the estimator library."""


class SubMHEError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SubMHEError, ValueError):
    """Inconsistent dimensions, options or parameter values."""


class NumericalOverflowError(SubMHEError, ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state produced at step {step}")


class CertificateError(SubMHEError):
    """A stability certificate is unavailable or invalid."""


class WindowUnderflowError(SubMHEError, IndexError):
    """A data window is shorter than the number of requested steps."""


class ContractViolation(SubMHEError, AssertionError):
    """A caller broke a documented precondition (programmer error)."""
