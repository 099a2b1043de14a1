"""Exception hierarchy shared by all modules."""


class QBIPWError(Exception):
    """Base class for package errors."""


class InputError(QBIPWError, ValueError):
    """Malformed or inconsistent input data."""


class EstimationError(QBIPWError, RuntimeError):
    """A numerical procedure failed (non-convergence, bad propensities, ...)."""


class IdentifiabilityError(EstimationError):
    """A Gram/design matrix is singular so the solution is not unique.

    Attributes
    ----------
    rank : int
        Numerical rank of the offending matrix.
    dim : int
        Number of columns.
    dependent : list of str
        Labels of columns that participate in a linear dependence.
    """

    def __init__(self, message, rank=None, dim=None, dependent=None):
        super().__init__(message)
        self.rank = rank
        self.dim = dim
        self.dependent = list(dependent or [])

    @property
    def nullity(self):
        if self.rank is None or self.dim is None:
            return None
        return self.dim - self.rank
