"""Population-mean estimators for a non-probability sample.

Estimator identifiers (stable across the API, CLI and simulation output):

=============  ==========================================================
``naive``      unweighted mean of ``y`` in ``S_A``
``ipw-mle``    inverse propensity weighting, pseudo-ML propensities
``ipw-gee``    inverse propensity weighting, calibrated propensities
``qbipw1-*``   quantile-balanced IPW with quartiles (and totals)
``qbipw2-*``   quantile-balanced IPW with deciles (and totals)
``mi-glm``     mass imputation with a linear / logistic outcome model
``mi-nn``      mass imputation with k nearest neighbours
``dr-mle``     doubly robust, pseudo-ML propensities
``dr-gee``     doubly robust, calibrated propensities
=============  ==========================================================
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from qbipw.calibration import build_a_matrix, dependent_columns, quantile_breaks_for
from qbipw.data_model import DECILES, QUARTILES, BalanceSpec, NonProbSample, ProbSample
from qbipw.errors import EstimationError, IdentifiabilityError, InputError
from qbipw.propensity import Design, PropensityFit, build_design, fit_propensity
from qbipw.solver import solve_system

log = logging.getLogger(__name__)

ESTIMATOR_IDS = (
    "naive",
    "ipw-mle",
    "ipw-gee",
    "qbipw1-mle",
    "qbipw1-gee",
    "qbipw2-mle",
    "qbipw2-gee",
    "mi-glm",
    "mi-nn",
    "dr-mle",
    "dr-gee",
)


@dataclass
class EstimateResult:
    point: float
    estimator_id: str
    se: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    variance_method: str = "none"
    diagnostics: dict = field(default_factory=dict)
    fit: Optional[PropensityFit] = field(default=None, repr=False, compare=False)
    design: Optional[Design] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {
            "estimator_id": self.estimator_id,
            "point": self.point,
            "se": self.se,
            "ci": None if self.ci_lower is None else [self.ci_lower, self.ci_upper],
            "variance_method": self.variance_method,
            "diagnostics": self.diagnostics,
        }


def naive_mean(a: NonProbSample) -> float:
    return float(np.mean(a.y))


def ipw_mean(a: NonProbSample, fit: PropensityFit, version: str = "ipw2", N: Optional[float] = None) -> float:
    """Inverse propensity weighted mean.

    ``ipw1`` divides the weighted total by the supplied ``N``; ``ipw2`` uses
    the Hajek normaliser ``sum_A 1 / pi``.
    """
    pi = np.asarray(fit.pi_A if isinstance(fit, PropensityFit) else fit, dtype=float)
    if np.any(pi <= 0):
        raise EstimationError("fitted propensities must be strictly positive")
    inv = 1.0 / pi
    total = float(inv @ a.y)
    version = version.lower()
    if version == "ipw1":
        if N is None:
            raise InputError("IPW1 requires the population size N")
        return total / float(N)
    if version == "ipw2":
        return total / float(inv.sum())
    raise InputError(f"unknown IPW version {version!r}")


def qbipw_mean(
    a: NonProbSample,
    b: ProbSample,
    spec: BalanceSpec,
    method: str = "gee",
    version: str = "ipw2",
    estimator_id: Optional[str] = None,
    **solver_kw,
) -> EstimateResult:
    """Propensity-weighted mean with a design built from ``spec``.

    Without quantile columns in ``spec`` this is plain IPW.
    """
    design = build_design(a, b, spec)
    fit = fit_propensity(design, b.d, method, **solver_kw)
    if not fit.converged:
        raise EstimationError(f"propensity fit ({method}) did not converge: {fit.message}")
    N = spec.resolve_N(b)
    point = ipw_mean(a, fit, version, N)
    eid = estimator_id or ("qbipw" if spec.has_quantiles else "ipw") + f"-{method}"
    return EstimateResult(
        point, eid, diagnostics={"propensity": fit.summary(), "version": version}, fit=fit, design=design
    )


def _ols(X, y):
    rank, dep = dependent_columns(X)
    if rank < X.shape[1]:
        raise IdentifiabilityError(
            f"outcome design is rank deficient (rank {rank} of {X.shape[1]})",
            rank=rank,
            dim=X.shape[1],
            dependent=dep,
        )
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    return beta


def logistic_fit(X, y, tol=1e-10, max_iter=100, on_separation="raise"):
    """Logistic regression coefficients by Newton's method on the score.

    Under (quasi-)separation the likelihood has no maximiser: the score
    vanishes while coefficients drift to infinity. With
    ``on_separation="warn"`` the last iterate is returned if its score is
    below ``sqrt(tol)``, with a warning, mirroring common GLM software.
    """
    rank, dep = dependent_columns(X)
    if rank < X.shape[1]:
        raise IdentifiabilityError(
            f"outcome design is rank deficient (rank {rank} of {X.shape[1]})",
            rank=rank,
            dim=X.shape[1],
            dependent=dep,
        )
    scale = np.max(np.abs(X), axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = X / scale

    def score(beta):
        return Xs.T @ (y - expit(Xs @ beta))

    def hess(beta):
        p = expit(Xs @ beta)
        return -(Xs * (p * (1 - p))[:, None]).T @ Xs

    sol = solve_system(score, hess, np.zeros(X.shape[1]), tol=tol, max_iter=max_iter, max_norm=1e4)
    if not sol.converged:
        if on_separation == "warn" and sol.residual_norm < np.sqrt(tol):
            warnings.warn(
                f"logistic outcome model: fitted probabilities numerically 0 or 1 ({sol.message})",
                UserWarning,
                stacklevel=2,
            )
        else:
            raise EstimationError(f"logistic outcome model did not converge: {sol.message}")
    return sol.x / scale


@dataclass
class OutcomeModel:
    beta: np.ndarray
    kind: str
    design: str

    def predict(self, X):
        eta = X @ self.beta
        return expit(eta) if self.kind == "binary" else eta


def _outcome_matrices(a, b, columns, with_quantiles):
    cols = list(range(a.X.shape[1])) if columns is None else list(columns)
    XA = np.column_stack([np.ones(a.n), a.X[:, cols]])
    XB = np.column_stack([np.ones(b.n), b.X[:, cols]])
    if with_quantiles:
        breaks = quantile_breaks_for(b.X, b.d, with_quantiles)
        N = b.total_weight
        XA = np.column_stack([XA, build_a_matrix(a.X, breaks, N, intercept=False)])
        XB = np.column_stack([XB, build_a_matrix(b.X, breaks, N, intercept=False)])
    return XA, XB


def fit_outcome(a, b, outcome_kind=None, columns=None, with_quantiles=None):
    """Fit ``E(y | x)`` on ``S_A``; returns the model and both design matrices."""
    kind = outcome_kind or ("binary" if a.is_binary else "continuous")
    XA, XB = _outcome_matrices(a, b, columns, with_quantiles)
    beta = logistic_fit(XA, a.y) if kind == "binary" else _ols(XA, a.y)
    return OutcomeModel(beta, kind, "x+a" if with_quantiles else "x"), XA, XB


def mi_glm(a, b, outcome_kind=None, columns=None, with_quantiles=None) -> float:
    """Mass imputation: weighted mean over ``S_B`` of outcome-model predictions.

    ``with_quantiles`` takes ``BalanceSpec.quantile_columns``-style pairs and
    adds the matching a-columns to the outcome design (piecewise regression).
    """
    model, _, XB = fit_outcome(a, b, outcome_kind, columns, with_quantiles)
    m_B = model.predict(XB)
    return float(b.d @ m_B / b.d.sum())


def _standardize(XA, XB):
    mu = XA.mean(axis=0)
    sd = XA.std(axis=0, ddof=1) if XA.shape[0] > 1 else np.zeros(XA.shape[1])
    keep = sd > 0
    if not np.all(keep):
        warnings.warn("dropping zero-variance columns from nearest-neighbour distance", UserWarning, stacklevel=3)
    return (XA[:, keep] - mu[keep]) / sd[keep], (XB[:, keep] - mu[keep]) / sd[keep]


def nearest_neighbours(XA, XB, k, chunk=256):
    """Indices of the ``k`` nearest ``XA`` rows for every ``XB`` row.

    Ties in distance go to the lower ``XA`` row index.
    """
    n_A = XA.shape[0]
    out = np.empty((XB.shape[0], k), dtype=np.int64)
    sq_A = np.einsum("ij,ij->i", XA, XA)
    for start in range(0, XB.shape[0], chunk):
        blk = XB[start : start + chunk]
        D = sq_A[None, :] - 2.0 * blk @ XA.T + np.einsum("ij,ij->i", blk, blk)[:, None]
        if k < n_A:
            part = np.argpartition(D, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(D, part, axis=1).max(axis=1)
        else:
            kth = D.max(axis=1)
        for r in range(blk.shape[0]):
            cand = np.flatnonzero(D[r] <= kth[r])
            order = np.argsort(D[r, cand], kind="stable")
            out[start + r] = cand[order[:k]]
    return out


def mi_nn(a, b, k=5, columns=None) -> float:
    """Nearest-neighbour mass imputation on standardised covariates."""
    if not 1 <= k <= a.n:
        raise InputError(f"k must lie in [1, {a.n}]")
    cols = list(range(a.X.shape[1])) if columns is None else list(columns)
    XA, XB = _standardize(a.X[:, cols], b.X[:, cols])
    if XA.shape[1] == 0:
        imputed = np.full(b.n, a.y.mean())
    else:
        idx = nearest_neighbours(XA, XB, k)
        imputed = a.y[idx].mean(axis=1)
    return float(b.d @ imputed / b.d.sum())


def dr_point(a, b, pi_A, m_A, m_B) -> float:
    """``(sum_A (y - m) / pi + sum_B d m) / sum_B d`` for given fits."""
    return float(((a.y - m_A) @ (1.0 / pi_A) + b.d @ m_B) / b.d.sum())


def dr_mean(
    a,
    b,
    spec: BalanceSpec,
    method="gee",
    outcome_kind=None,
    columns=None,
    estimator_id=None,
    **solver_kw,
) -> EstimateResult:
    """Doubly robust mean: outcome-model prediction plus IPW-weighted residuals.

    ``(sum_A (y - m) / pi + sum_B d m) / sum_B d``.
    """
    design = build_design(a, b, spec)
    fit = fit_propensity(design, b.d, method, **solver_kw)
    if not fit.converged:
        raise EstimationError(f"propensity fit ({method}) did not converge: {fit.message}")
    model, XA, XB = fit_outcome(a, b, outcome_kind, columns)
    point = dr_point(a, b, fit.pi_A, model.predict(XA), model.predict(XB))
    return EstimateResult(
        point, estimator_id or f"dr-{method}", diagnostics={"propensity": fit.summary()}, fit=fit, design=design
    )


def spec_for(estimator_id: str, p: int, quantile_columns=None, total_columns=None, population_size=None):
    """Default balancing spec for a simulation estimator id.

    ``quantile_columns`` overrides the quartile/decile defaults for the
    ``qbipw*`` ids; ``total_columns`` defaults to every covariate.
    """
    totals = tuple(range(p)) if total_columns is None else tuple(total_columns)
    base = BalanceSpec(total_columns=totals, population_size=population_size)
    if estimator_id.startswith("qbipw"):
        if quantile_columns:
            qc = tuple(quantile_columns)
        else:
            levels = QUARTILES if estimator_id.startswith("qbipw1") else DECILES
            qc = tuple((j, levels) for j in range(p))
        return replace(base, quantile_columns=qc)
    return base


def estimate(
    estimator_id: str,
    a: NonProbSample,
    b: ProbSample,
    spec: Optional[BalanceSpec] = None,
    version: str = "ipw2",
    outcome_kind=None,
    k: int = 5,
) -> EstimateResult:
    """Dispatch an estimator by id."""
    if estimator_id not in ESTIMATOR_IDS:
        raise InputError(f"unknown estimator {estimator_id!r}; choose from {', '.join(ESTIMATOR_IDS)}")
    p = a.X.shape[1]
    if spec is None:
        spec = spec_for(estimator_id, p)
    if estimator_id == "naive":
        return EstimateResult(naive_mean(a), "naive")
    if estimator_id == "mi-glm":
        cols = spec.total_columns or None
        return EstimateResult(mi_glm(a, b, outcome_kind, cols), "mi-glm")
    if estimator_id == "mi-nn":
        cols = spec.total_columns or None
        return EstimateResult(mi_nn(a, b, k, cols), "mi-nn")
    method = estimator_id.rsplit("-", 1)[1]
    if estimator_id.startswith("dr-"):
        return dr_mean(a, b, spec.totals_only(), method, outcome_kind, spec.total_columns or None, estimator_id)
    if estimator_id.startswith("ipw-"):
        spec = spec.totals_only()
    return qbipw_mean(a, b, spec, method, version, estimator_id)
