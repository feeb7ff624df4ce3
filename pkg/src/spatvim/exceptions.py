"""Exception hierarchy shared by all modules."""


class SpatvimError(Exception):
    """Base class for errors raised by spatvim."""


class DomainError(SpatvimError, ValueError):
    """A value lies outside the domain of a transform or link function."""


class ConfigurationError(SpatvimError, ValueError):
    """Inconsistent or unsupported configuration."""


class DegenerateInputError(SpatvimError, ValueError):
    """Input data carry no information for the requested fit."""


class NumericalRankError(SpatvimError, ArithmeticError):
    """A covariance or design matrix could not be factorized."""


class ConvergenceError(SpatvimError, RuntimeError):
    """An iterative optimizer exhausted its budget.

    Parameters
    ----------
    message : str
        Description of the failure.
    best : object
        Best-so-far solution, so callers can decide to keep it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class GridShapeError(SpatvimError, ValueError):
    """A quantile grid does not have the shape an operation requires."""


class SchemaError(SpatvimError, ValueError):
    """A file does not follow the expected schema or format version."""
