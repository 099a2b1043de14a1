"""Calibration for totals and quantiles with quadratic distance.

The quantile machinery uses the interpolated distribution function: the
weighted step CDF of the reference values is linearly interpolated between
consecutive distinct values, so every level in (0, 1) is attained exactly by
some threshold. A quantile constraint at level ``alpha`` becomes a linear
constraint on the weights through the ``a``-vector of each unit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from qbipw.errors import IdentifiabilityError, InputError


def heaviside(t, y):
    """Step function: 1 where ``t >= y``, else 0."""
    return np.where(np.asarray(t) >= np.asarray(y), 1, 0)


def smooth_heaviside(x, steepness=1.0):
    """Logistic approximation ``1 / (1 + exp(-2 k x))`` of the step at zero."""
    if not steepness > 0:
        raise ValueError("steepness must be positive")
    return expit(2.0 * steepness * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class QuantileBreaks:
    """Bracketing values of the reference sample around a target quantile.

    ``lower`` is the largest reference value ``<= Q`` and ``upper`` the
    smallest value ``> Q``; ``theta`` is the position of ``Q`` inside
    ``[lower, upper]``.
    """

    column: int
    alpha: float
    Q: float
    lower: float
    upper: float
    theta: float

    @property
    def degenerate(self) -> bool:
        return self.lower == self.upper


def _cdf_knots(values, weights):
    """Distinct sorted values and the cumulative weight share at each."""
    values = np.asarray(values, dtype=float).ravel()
    weights = np.asarray(weights, dtype=float).ravel()
    if values.shape != weights.shape:
        raise InputError("values and weights must have the same length")
    if values.size == 0:
        raise InputError("values must be nonempty")
    total = weights.sum()
    if not total > 0:
        raise InputError("weights must have a positive sum")
    uniq, inverse = np.unique(values, return_inverse=True)
    mass = np.bincount(inverse, weights=weights, minlength=uniq.size)
    return uniq, np.cumsum(mass) / total


def _brackets(uniq, t):
    """(L, U) of ``t`` against sorted distinct values, with +-inf conventions."""
    t = np.asarray(t, dtype=float)
    pos = np.searchsorted(uniq, t, side="right")
    lower = np.where(pos > 0, uniq[np.maximum(pos - 1, 0)], -np.inf)
    upper = np.where(pos < uniq.size, uniq[np.minimum(pos, uniq.size - 1)], np.inf)
    return lower, upper


def _theta(t, lower, upper):
    with np.errstate(invalid="ignore", divide="ignore"):
        th = (t - lower) / (upper - lower)
    return np.where(np.isfinite(lower) & np.isfinite(upper), th, 0.0)


def modified_heaviside(t, y, sample_values):
    """Interpolating step function evaluated against a reference sample.

    Returns 1 if ``y <= L(t)``, ``theta(t)`` if ``L(t) < y <= U(t)`` and 0 if
    ``y > U(t)``, where ``L``/``U`` bracket ``t`` among ``sample_values``. For
    ``y`` drawn from the sample itself the middle branch is exactly
    ``y == U(t)``.
    """
    uniq = np.unique(np.asarray(sample_values, dtype=float))
    if uniq.size == 0:
        raise InputError("sample_values must be nonempty")
    t = float(t)
    lower, upper = _brackets(uniq, t)
    th = _theta(t, lower, upper)
    y = np.asarray(y, dtype=float)
    return np.where(y <= lower, 1.0, np.where(y <= upper, th, 0.0))


def interpolated_cdf(weights, values, t):
    """Weighted interpolated distribution function at ``t`` (scalar or array)."""
    uniq, cum = _cdf_knots(values, weights)
    t = np.asarray(t, dtype=float)
    pos = np.searchsorted(uniq, t, side="right")
    lower, upper = _brackets(uniq, t)
    th = _theta(t, lower, upper)
    below = np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)
    above = np.where(pos < uniq.size, cum[np.minimum(pos, uniq.size - 1)], 1.0)
    out = below + th * (above - below)
    out = np.where(pos == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def weighted_quantile(weights, values, alpha):
    """Inverse of :func:`interpolated_cdf`: smallest ``t`` with ``F(t) >= alpha``."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    uniq, cum = _cdf_knots(values, weights)
    i = int(np.searchsorted(cum, alpha, side="left"))
    # guard against cum[-1] being 1 - eps
    i = min(i, uniq.size - 1)
    if i == 0:
        return float(uniq[0])
    lo, hi = cum[i - 1], cum[i]
    if hi <= lo:
        return float(uniq[i])
    frac = (alpha - lo) / (hi - lo)
    return float(uniq[i - 1] + frac * (uniq[i] - uniq[i - 1]))


def compute_breaks(values, weights, alpha, column=0):
    """Target quantile of the reference sample and its bracketing values.

    A sample with a single distinct value gives ``lower == upper`` and
    ``theta == 0`` and emits a :class:`UserWarning`.
    """
    Q = weighted_quantile(weights, values, alpha)
    uniq = np.unique(np.asarray(values, dtype=float))
    if uniq.size == 1:
        warnings.warn(
            f"column {column}: all reference values equal {uniq[0]}; quantile constraint is degenerate",
            UserWarning,
            stacklevel=2,
        )
        return QuantileBreaks(column, float(alpha), Q, float(uniq[0]), float(uniq[0]), 0.0)
    lower, upper = _brackets(uniq, Q)
    lower, upper = float(lower), float(upper)
    theta = float(_theta(Q, lower, upper))
    return QuantileBreaks(column, float(alpha), Q, lower, upper, theta)


def breaks_at(values, Q, alpha, column=0):
    """Brackets of a known target quantile ``Q`` among ``values``.

    Used when ``Q`` comes from outside the sample (e.g. a register). ``Q``
    must lie in ``[min(values), max(values))``.
    """
    uniq = np.unique(np.asarray(values, dtype=float))
    lower, upper = _brackets(uniq, float(Q))
    lower, upper = float(lower), float(upper)
    if not (np.isfinite(lower) and np.isfinite(upper)):
        raise InputError(
            f"target quantile {Q} of column {column} lies outside the sample range [{uniq[0]}, {uniq[-1]})"
        )
    return QuantileBreaks(column, float(alpha), float(Q), lower, upper, float(_theta(Q, lower, upper)))


def a_column(x, brk: QuantileBreaks, N: float):
    """One quantile column of the a-matrix for covariate values ``x``.

    Values in the open bracket ``(lower, upper)`` (possible only for units not
    in the reference sample) share the ``upper`` branch.
    """
    if not np.isfinite(brk.upper):
        raise InputError(
            f"quantile {brk.alpha} of column {brk.column} has no upper bracket in the reference sample"
        )
    x = np.asarray(x, dtype=float)
    if brk.degenerate:
        h = np.where(x <= brk.lower, 1.0, 0.0)
    else:
        h = np.where(x <= brk.lower, 1.0, np.where(x <= brk.upper, brk.theta, 0.0))
    return h / N


def quantile_breaks_for(X, d, spec_quantiles):
    """Breaks for every ``(column, alpha)`` pair, computed on the reference sample."""
    X = np.asarray(X, dtype=float)
    out = []
    for j, alphas in spec_quantiles:
        for al in alphas:
            out.append(compute_breaks(X[:, j], d, al, column=j))
    return out


def build_a_matrix(X, breaks: Sequence[QuantileBreaks], N: float, intercept=True):
    """Stack the leading column of ones and one a-column per break."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    cols = [np.ones(X.shape[0])] if intercept else []
    cols += [a_column(X[:, b.column], b, N) for b in breaks]
    if not cols:
        return np.empty((X.shape[0], 0))
    return np.column_stack(cols)


def a_targets(breaks: Sequence[QuantileBreaks], N: float, intercept=True):
    """Calibration targets ``(N, alpha, ..., alpha)`` matching :func:`build_a_matrix`."""
    t = [float(N)] if intercept else []
    return np.array(t + [b.alpha for b in breaks])


def dependent_columns(M, labels=None, rtol=None):
    """Labels of columns involved in a near-linear dependence of ``M``.

    Columns are equilibrated first so that the verdict does not depend on
    their units. Returns ``(rank, dependent_labels)``.
    """
    M = np.asarray(M, dtype=float)
    n, p = M.shape
    labels = list(labels) if labels is not None else [f"col{j}" for j in range(p)]
    if p == 0:
        return 0, []
    scale = np.linalg.norm(M, axis=0)
    zero = scale == 0
    Ms = M / np.where(zero, 1.0, scale)
    # full V only needed when there are fewer rows than columns
    _, s, vt = np.linalg.svd(Ms, full_matrices=n < p)
    tol = (rtol if rtol is not None else max(n, p) * np.finfo(float).eps) * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    if rank == p:
        return rank, []
    null = vt[rank:]
    involved = np.flatnonzero(np.max(np.abs(null), axis=0) > 1e-8) if null.size else np.array([], int)
    involved = sorted(set(involved.tolist()) | set(np.flatnonzero(zero).tolist()))
    return rank, [labels[j] for j in involved]


def _linear_calibration(d, M, targets, labels=None):
    d = np.asarray(d, dtype=float).ravel()
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M.reshape(-1, 1)
    targets = np.asarray(targets, dtype=float).ravel()
    if M.shape[0] != d.shape[0] or M.shape[1] != targets.shape[0]:
        raise InputError("shape mismatch between weights, constraint matrix and targets")
    rank, dep = dependent_columns(M * np.sqrt(np.abs(d))[:, None], labels)
    if rank < M.shape[1]:
        raise IdentifiabilityError(
            f"calibration Gram matrix is singular (rank {rank} of {M.shape[1]}); "
            f"dependent columns: {', '.join(dep)}",
            rank=rank,
            dim=M.shape[1],
            dependent=dep,
        )
    gram = (M * d[:, None]).T @ M
    gap = targets - d @ M
    lam = np.linalg.solve(gram, gap)
    return d + d * (M @ lam)


def calibrate_totals(d, X, targets, labels=None):
    """Chi-square distance calibration weights reproducing known totals.

    Solves ``min sum d (w/d - 1)^2 / 2`` subject to ``sum w x = targets`` in
    closed form. Raises :class:`IdentifiabilityError` if ``sum d x x'`` is
    singular.
    """
    return _linear_calibration(d, X, targets, labels)


def calibrate_quantiles(d, a, targets, labels=None):
    """Chi-square distance calibration weights for an a-matrix.

    ``a`` is the output of :func:`build_a_matrix` (first column ones) and
    ``targets`` is ``(N, alpha, ...)``. The returned weights sum to ``N`` and
    reproduce every target quantile under the interpolated CDF.
    """
    return _linear_calibration(d, a, targets, labels)
