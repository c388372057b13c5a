"""Exception hierarchy."""


class SpcaError(Exception):
    """Base class for all package errors."""


class ParameterError(SpcaError, ValueError):
    pass


class DataFormatError(SpcaError, ValueError):
    pass


class DegenerateDataError(SpcaError):
    pass


class FitError(SpcaError):
    pass


class OutOfSupportError(SpcaError):
    pass


class RangeError(SpcaError):
    """A requested response lies beyond the reachable weighted length."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class ExtrapolationError(SpcaError):
    pass


class NonConvergedError(SpcaError):
    pass


class ConfigError(SpcaError, ValueError):
    pass
