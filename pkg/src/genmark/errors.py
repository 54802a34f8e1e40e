"""Exception types shared across the package."""


class GenmarkError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GenmarkError, ValueError):
    pass


class DimensionError(GenmarkError, ValueError):
    pass


class IngestionError(GenmarkError):
    """A dataset or synthesis entry could not be read.

    ``entry`` holds the offending relative path (or other identifier).
    """

    def __init__(self, message: str, entry: str | None = None):
        super().__init__(message)
        self.entry = entry


class ValidationError(GenmarkError, ValueError):
    pass


class InsufficientDataError(GenmarkError, ValueError):
    pass


class NumericalDegeneracyError(GenmarkError, ArithmeticError):
    pass


class TrainingAborted(GenmarkError, RuntimeError):
    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log


class CheckpointError(GenmarkError):
    pass
