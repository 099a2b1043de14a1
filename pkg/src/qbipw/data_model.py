"""Two-sample data setup and the balancing specification.

A non-probability sample ``S_A`` carries outcomes and covariates but no
design weights; a probability (reference) sample ``S_B`` carries covariates
and design weights but no outcomes. Both share the same covariate columns.

The estimators in this package are only valid under the usual assumptions
for propensity-based inference from non-probability samples, which cannot be
checked from the data and are the caller's responsibility:

* selection into ``S_A`` is independent of ``y`` given ``x``;
* every population unit has a strictly positive propensity;
* selection indicators are independent given the covariates.

Units appearing in both samples are treated as distinct records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from qbipw.errors import InputError


def _frozen(arr, dtype=float, ndim=None):
    out = np.array(arr, dtype=dtype, copy=True)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    out.setflags(write=False)
    return out


def _default_names(p):
    return [f"x{j + 1}" for j in range(p)]


@dataclass(frozen=True)
class NonProbSample:
    """Units of the non-probability sample: covariates ``X`` and outcome ``y``."""

    X: np.ndarray
    y: np.ndarray
    column_names: list = field(default_factory=list)

    def __post_init__(self):
        X = _frozen(self.X, ndim=2)
        y = _frozen(self.y).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        names = list(self.column_names) or _default_names(X.shape[1])
        object.__setattr__(self, "column_names", names)
        if X.shape[0] < 1:
            raise InputError("non-probability sample is empty")
        if y.shape[0] != X.shape[0]:
            raise InputError(
                f"outcome length {y.shape[0]} does not match {X.shape[0]} rows of X"
            )
        if len(names) != X.shape[1]:
            raise InputError("column_names length does not match X columns")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise InputError("missing or non-finite values in non-probability sample")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.y == 0) | (self.y == 1)))

    def take(self, idx) -> "NonProbSample":
        return NonProbSample(self.X[idx], self.y[idx], self.column_names)


@dataclass(frozen=True)
class ProbSample:
    """Units of the probability sample: covariates ``X`` and design weights ``d``.

    ``strata`` are optional integer labels used by the stratified bootstrap
    and by the design-variance component of the sandwich estimator.
    """

    X: np.ndarray
    d: np.ndarray
    column_names: list = field(default_factory=list)
    strata: Optional[np.ndarray] = None

    def __post_init__(self):
        X = _frozen(self.X, ndim=2)
        d = _frozen(self.d).ravel()
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "d", d)
        names = list(self.column_names) or _default_names(X.shape[1])
        object.__setattr__(self, "column_names", names)
        if self.strata is not None:
            strata = _frozen(self.strata, dtype=np.int64).ravel()
            if strata.shape[0] != X.shape[0]:
                raise InputError("strata length does not match rows of X")
            object.__setattr__(self, "strata", strata)
        if X.shape[0] < 1:
            raise InputError("probability sample is empty")
        if d.shape[0] != X.shape[0]:
            raise InputError(
                f"weight length {d.shape[0]} does not match {X.shape[0]} rows of X"
            )
        if len(names) != X.shape[1]:
            raise InputError("column_names length does not match X columns")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(d)):
            raise InputError("missing or non-finite values in probability sample")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.d))

    def take(self, idx) -> "ProbSample":
        strata = None if self.strata is None else self.strata[idx]
        return ProbSample(self.X[idx], self.d[idx], self.column_names, strata)


@dataclass(frozen=True)
class BalanceSpec:
    """Which covariates enter the propensity model and how.

    Parameters
    ----------
    total_columns : sequence of int
        Column indices balanced on totals (enter ``z`` as raw covariates).
    quantile_columns : sequence of (int, sequence of float)
        Column index and the quantile levels balanced for it.
    include_intercept : bool
        Prepend a column of ones (balances the population size).
    population_size : float, optional
        Known ``N``. When absent, the sum of the reference design weights is
        used instead.
    """

    total_columns: tuple = ()
    quantile_columns: tuple = ()
    include_intercept: bool = True
    population_size: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "total_columns", tuple(int(j) for j in self.total_columns))
        object.__setattr__(
            self,
            "quantile_columns",
            tuple((int(j), tuple(float(a) for a in alphas)) for j, alphas in self.quantile_columns),
        )

    @classmethod
    def quantiles(cls, columns: Sequence[int], alphas: Sequence[float], totals=True, **kw):
        """Same levels on every listed column; optionally balance totals too."""
        cols = tuple(columns)
        return cls(
            total_columns=cols if totals else (),
            quantile_columns=tuple((j, tuple(alphas)) for j in cols),
            **kw,
        )

    @property
    def has_quantiles(self) -> bool:
        return any(len(a) > 0 for _, a in self.quantile_columns)

    def n_quantile_terms(self) -> int:
        return sum(len(a) for _, a in self.quantile_columns)

    def totals_only(self) -> "BalanceSpec":
        return BalanceSpec(self.total_columns, (), self.include_intercept, self.population_size)

    def resolve_N(self, b: ProbSample) -> float:
        return float(self.population_size) if self.population_size is not None else b.total_weight


QUARTILES = (0.25, 0.5, 0.75)
DECILES = tuple(round(0.1 * k, 10) for k in range(1, 10))


def validate_pair(a: NonProbSample, b: ProbSample, spec: BalanceSpec) -> list:
    """Check a sample pair against a spec; return a list of violation messages.

    An empty list means the pair is valid. Nothing is raised.
    """
    problems = []
    if a.X.shape[1] != b.X.shape[1]:
        problems.append(
            f"column count mismatch: non-probability sample has {a.X.shape[1]}, "
            f"probability sample has {b.X.shape[1]}"
        )
    elif list(a.column_names) != list(b.column_names):
        for j, (ca, cb) in enumerate(zip(a.column_names, b.column_names)):
            if ca != cb:
                problems.append(f"column {j} name mismatch: {ca!r} vs {cb!r}")
    for k in np.flatnonzero(~(b.d > 0)):
        problems.append(f"nonpositive design weight at row {int(k)}")
    p = min(a.X.shape[1], b.X.shape[1])
    for j in spec.total_columns:
        if not 0 <= j < p:
            problems.append(f"total column index {j} out of range")
    for j, alphas in spec.quantile_columns:
        if not 0 <= j < p:
            problems.append(f"quantile column index {j} out of range")
        for al in alphas:
            if not 0.0 < al < 1.0:
                problems.append(f"quantile level out of (0,1): {al} for column {j}")
        if list(alphas) != sorted(set(alphas)):
            problems.append(f"quantile levels for column {j} must be sorted and duplicate-free")
    if spec.population_size is not None and not spec.population_size > 0:
        problems.append("population size must be positive")
    if a.y.shape[0] != a.X.shape[0]:
        problems.append("outcome length does not match rows of X")
    return problems
