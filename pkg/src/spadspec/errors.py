"""Exception types shared across the package."""


class SpadSpecError(Exception):
    """Base class; the CLI maps these to exit status 1."""


class DomainError(SpadSpecError, ValueError):
    def __init__(self, message, index=None, offset=None):
        super().__init__(message)
        self.index = index
        self.offset = offset


class ConfigurationError(SpadSpecError, ValueError):
    pass


class InsufficientStatistics(SpadSpecError):
    pass


class CalibrationError(SpadSpecError):
    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class FitError(SpadSpecError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(SpadSpecError):
    pass


class RawFormatError(DomainError):
    pass
