"""Exception types shared across the package."""


class FoslsError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(FoslsError, ValueError):
    pass


class ConfigurationError(FoslsError, ValueError):
    pass


class NonFiniteSampleError(FoslsError, FloatingPointError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class AssemblyError(FoslsError, FloatingPointError):
    pass


class NumericalError(FoslsError, ArithmeticError):
    pass


class TrainingAborted(FoslsError, FloatingPointError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, iteration=None, seed=None):
        super().__init__(message)
        self.iteration = iteration
        self.seed = seed
