"""Logistic propensity scores for membership in the non-probability sample.

Two estimators of the coefficients are provided:

* pseudo maximum likelihood (``mle``): root of the pseudo-score
  ``U(eta) = sum_A z - sum_B d pi(z) z``;
* calibrated estimating equations (``gee``): root of
  ``G(eta) = sum_A z / pi(z) - sum_B d z``, which makes the inverse
  propensity weights of ``S_A`` reproduce the weighted ``S_B`` totals of
  every design column.

The design vector ``z`` concatenates an intercept, covariates balanced on
totals and, for quantile balancing, the a-columns built from reference-sample
quantiles. Columns are rescaled internally so that the solver sees entries of
order one; reported coefficients are on the original scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from qbipw.calibration import a_column, dependent_columns, quantile_breaks_for
from qbipw.data_model import BalanceSpec, NonProbSample, ProbSample
from qbipw.errors import IdentifiabilityError, InputError
from qbipw.solver import solve_system

log = logging.getLogger(__name__)

# logit(1 - 1e-12): propensities are kept inside [1e-12, 1 - 1e-12] while iterating
MAX_LINPRED = 27.631021115928547
SEPARATION_NORM = 1e4


@dataclass(frozen=True)
class Design:
    """Design matrices for both samples with a shared column layout."""

    Z_A: np.ndarray
    Z_B: np.ndarray
    names: list
    breaks: list
    N: float
    n_x: int

    @property
    def n_cols(self) -> int:
        return self.Z_A.shape[1]

    @property
    def x_slice(self) -> slice:
        return slice(0, self.n_x)

    @property
    def a_slice(self) -> slice:
        return slice(self.n_x, self.n_cols)


def build_design(a: NonProbSample, b: ProbSample, spec: BalanceSpec, breaks=None) -> Design:
    """Assemble ``[1 | X_totals | a-columns]`` for both samples.

    Quantile breakpoints come from the reference sample and are applied to
    both samples. Precomputed ``breaks`` may be passed to skip that step.
    """
    if a.X.shape[1] != b.X.shape[1]:
        raise InputError("samples have different numbers of covariate columns")
    N = spec.resolve_N(b)
    names, cols_A, cols_B = [], [], []
    if spec.include_intercept:
        names.append("(Intercept)")
        cols_A.append(np.ones(a.n))
        cols_B.append(np.ones(b.n))
    for j in spec.total_columns:
        names.append(a.column_names[j])
        cols_A.append(a.X[:, j])
        cols_B.append(b.X[:, j])
    n_x = len(names)
    if breaks is None:
        breaks = quantile_breaks_for(b.X, b.d, spec.quantile_columns)
    for brk in breaks:
        names.append(f"{a.column_names[brk.column]}@q{brk.alpha:g}")
        cols_A.append(a_column(a.X[:, brk.column], brk, N))
        cols_B.append(a_column(b.X[:, brk.column], brk, N))
    if not names:
        raise InputError("empty design: no intercept, totals or quantiles")
    return Design(np.column_stack(cols_A), np.column_stack(cols_B), names, list(breaks), N, n_x)


def _linpred(eta, Z):
    return Z @ eta


def pseudo_log_likelihood(eta, Z_A, Z_B, d):
    """Pseudo log-likelihood ``sum_A z'eta + sum_B d log(1 - pi)``."""
    eta = np.asarray(eta, dtype=float)
    return float(np.sum(_linpred(eta, Z_A)) + d @ log_expit(-_linpred(eta, Z_B)))


def score_U(eta, Z_A, Z_B, d):
    """Gradient of :func:`pseudo_log_likelihood`."""
    pi_B = expit(_linpred(eta, Z_B))
    return Z_A.sum(axis=0) - Z_B.T @ (d * pi_B)


def score_jacobian(eta, Z_A, Z_B, d):
    pi_B = expit(_linpred(eta, Z_B))
    w = d * pi_B * (1.0 - pi_B)
    return -(Z_B * w[:, None]).T @ Z_B


def gee_G(eta, Z_A, Z_B, d, clip=False):
    """Calibration residual ``sum_A z / pi - sum_B d z``."""
    t = _linpred(eta, Z_A)
    if clip:
        t = np.maximum(t, -MAX_LINPRED)
    inv_pi = 1.0 + np.exp(-t)
    return Z_A.T @ inv_pi - Z_B.T @ d


def gee_jacobian(eta, Z_A, Z_B, d, clip=False):
    t = _linpred(eta, Z_A)
    if clip:
        t = np.maximum(t, -MAX_LINPRED)
    w = np.exp(-t)
    return -(Z_A * w[:, None]).T @ Z_A


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Positive-definiteness verdict for ``sum z z'`` over one sample."""

    which: str
    ok: bool
    rank: int
    dim: int
    eigenvalues: tuple
    dependent: tuple = ()

    @property
    def nullity(self) -> int:
        return self.dim - self.rank

    @property
    def message(self) -> str:
        if self.ok:
            return f"{self.which}: Gram matrix positive definite (rank {self.rank})"
        return (
            f"{self.which}: Gram matrix rank {self.rank} of {self.dim}; "
            f"solution space has dimension {self.nullity}"
            + (f"; dependent columns: {', '.join(self.dependent)}" if self.dependent else "")
        )

    def as_dict(self):
        return {
            "which": self.which,
            "ok": self.ok,
            "rank": self.rank,
            "dim": self.dim,
            "nullity": self.nullity,
            "min_eigenvalue": float(min(self.eigenvalues)) if self.eigenvalues else None,
            "dependent": list(self.dependent),
            "message": self.message,
        }


def check_identifiability(Z, which="B1", names=None) -> IdentifiabilityReport:
    """Check that ``sum_k z_k z_k'`` is positive definite.

    ``which`` is a label only: ``"B1"`` for the non-probability sample (needed
    by the calibrated equations), ``"B2"`` for the reference sample (needed
    by the pseudo-likelihood).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    rank, dep = dependent_columns(Z, names)
    eig = np.linalg.eigvalsh(Z.T @ Z)
    return IdentifiabilityReport(which, rank == Z.shape[1], rank, Z.shape[1], tuple(eig.tolist()), tuple(dep))


@dataclass(frozen=True)
class PropensityFit:
    eta: np.ndarray
    pi_A: np.ndarray
    pi_B: np.ndarray
    method: str
    converged: bool
    iterations: int
    residual_norm: float
    constraint_residuals: np.ndarray
    message: str = ""
    names: list = field(default_factory=list)
    gate: Optional[IdentifiabilityReport] = None

    def summary(self) -> dict:
        return {
            "method": self.method,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "message": self.message,
            "coefficients": dict(zip(self.names, map(float, self.eta))),
            "constraint_residuals": dict(zip(self.names, map(float, self.constraint_residuals))),
            "gate": self.gate.as_dict() if self.gate is not None else None,
        }


def _column_scale(Z_A, Z_B):
    s = np.maximum(np.max(np.abs(Z_A), axis=0), np.max(np.abs(Z_B), axis=0))
    return np.where(s > 0, s, 1.0)


def _start(Z_A, Z_B, d, names):
    eta = np.zeros(Z_A.shape[1])
    if names and names[0] == "(Intercept)":
        ratio = np.clip(Z_A.shape[0] / np.sum(d), 1e-6, 1 - 1e-6)
        eta[0] = np.log(ratio / (1.0 - ratio))
    return eta


def _finish(method, sol, scale, Z_A, Z_B, d, names, gate, residual_fn):
    eta = sol.x / scale
    t_A = Z_A @ eta
    pi_A = expit(t_A)
    pi_B = expit(Z_B @ eta)
    resid = residual_fn(eta, Z_A, Z_B, d)
    converged = sol.converged
    message = sol.message
    # pi -> 1 only pins a weight at one; pi -> 0 sits in the clipped region
    # where the solved equations differ from the model
    if converged and np.min(t_A) <= -MAX_LINPRED:
        converged = False
        message = "propensities saturated at 0 (separation)"
    return PropensityFit(
        eta=eta,
        pi_A=pi_A,
        pi_B=pi_B,
        method=method,
        converged=converged,
        iterations=sol.iterations,
        residual_norm=float(np.max(np.abs(resid))),
        constraint_residuals=np.abs(resid),
        message=message,
        names=list(names),
        gate=gate,
    )


def _names(Z, names):
    return list(names) if names is not None else [f"z{j}" for j in range(Z.shape[1])]


def solve_mle(Z_A, Z_B, d, names=None, tol=1e-8, max_iter=100, x0=None) -> PropensityFit:
    """Pseudo maximum likelihood fit; requires the B2 gate on ``Z_B``."""
    Z_A, Z_B, d = np.asarray(Z_A, float), np.asarray(Z_B, float), np.asarray(d, float)
    names = _names(Z_A, names)
    gate = check_identifiability(Z_B, "B2", names)
    if not gate.ok:
        raise IdentifiabilityError(gate.message, gate.rank, gate.dim, gate.dependent)
    scale = _column_scale(Z_A, Z_B)
    A, B = Z_A / scale, Z_B / scale
    start = _start(A, B, d, names) if x0 is None else np.asarray(x0, float) * scale
    # rows multiplied back by the scale so tol applies to residuals in original units
    sol = solve_system(
        lambda e: score_U(e, A, B, d) * scale,
        lambda e: score_jacobian(e, A, B, d) * scale[:, None],
        start,
        tol=tol,
        max_iter=max_iter,
        max_norm=SEPARATION_NORM,
    )
    return _finish("mle", sol, scale, Z_A, Z_B, d, names, gate, score_U)


def solve_gee(Z_A, Z_B, d, names=None, tol=1e-8, max_iter=100, x0=None) -> PropensityFit:
    """Calibrated (GEE) fit; requires the B1 gate on ``Z_A``."""
    Z_A, Z_B, d = np.asarray(Z_A, float), np.asarray(Z_B, float), np.asarray(d, float)
    names = _names(Z_A, names)
    gate = check_identifiability(Z_A, "B1", names)
    if not gate.ok:
        raise IdentifiabilityError(gate.message, gate.rank, gate.dim, gate.dependent)
    scale = _column_scale(Z_A, Z_B)
    A, B = Z_A / scale, Z_B / scale
    start = _start(A, B, d, names) if x0 is None else np.asarray(x0, float) * scale
    sol = solve_system(
        lambda e: gee_G(e, A, B, d, clip=True) * scale,
        lambda e: gee_jacobian(e, A, B, d, clip=True) * scale[:, None],
        start,
        tol=tol,
        max_iter=max_iter,
        max_norm=SEPARATION_NORM,
    )
    return _finish("gee", sol, scale, Z_A, Z_B, d, names, gate, gee_G)


def fit_propensity(design: Design, d, method: str, **kw) -> PropensityFit:
    method = method.lower()
    if method == "mle":
        return solve_mle(design.Z_A, design.Z_B, d, design.names, **kw)
    if method == "gee":
        return solve_gee(design.Z_A, design.Z_B, d, design.names, **kw)
    raise InputError(f"unknown propensity method {method!r}; expected 'mle' or 'gee'")
