"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class IVOPEError(Exception):
    """Base class for all package errors."""


class ValidationError(IVOPEError, ValueError):
    """A model, policy, dataset or config violates a structural requirement."""


class NumericalError(IVOPEError, ArithmeticError):
    """A linear system is singular or too ill-conditioned to solve."""


class DatasetFormatError(IVOPEError, ValueError):
    """A dataset file cannot be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message}, line {line}"
        super().__init__(message)
        self.line = line
