"""Exception hierarchy shared by all modules."""


class SLVError(Exception):
    """Base class for every error raised by the package."""


class DataError(SLVError, ValueError):
    """Malformed or inconsistent input data."""


class RangeError(SLVError, ValueError):
    """Query outside the domain covered by a curve, grid or schedule."""


class CalendarError(SLVError, ValueError):
    """Business-day calendar cannot support the requested schedule."""


class ConfigError(SLVError, ValueError):
    """Invalid numerical or run configuration."""


class DomainError(SLVError, ValueError):
    """Argument outside the mathematical domain of a map."""


class ParamError(SLVError, ValueError):
    """Model parameters violate their invariants."""


class NumericsError(SLVError, ArithmeticError):
    """A numerical scheme produced NaN or otherwise diverged."""


class CalibrationError(SLVError):
    """Calibration failed to reach its tolerance.

    The best candidate found so far is kept on the exception so callers can
    still inspect or persist it.
    """

    def __init__(self, message, best=None, residuals=None):
        super().__init__(message)
        self.best = best
        self.residuals = residuals
