"""Quantile-balancing inverse probability weighting for non-probability samples."""

from qbipw.data_model import BalanceSpec, NonProbSample, ProbSample, validate_pair
from qbipw.errors import EstimationError, IdentifiabilityError, InputError

__version__ = "0.1.0"

__all__ = [
    "BalanceSpec",
    "EstimationError",
    "IdentifiabilityError",
    "InputError",
    "NonProbSample",
    "ProbSample",
    "validate_pair",
    "__version__",
]
