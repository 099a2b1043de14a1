"""Variance estimation for the IPW family: sandwich and bootstrap.

The sandwich works on the stacked estimating function of ``theta = (tau, eta)``::

    Phi_0 = N^-1 sum_A (y - tau) / pi              (Hajek / IPW2 form)
    Phi_0 = N^-1 (sum_A y / pi - tau N)            (IPW1 form)
    Phi_r = G(eta) or U(eta)                       (propensity equations)

Scaling individual rows of ``Phi`` does not change the variance of ``tau``,
so the propensity rows are left in the units of :func:`gee_G` /
:func:`score_U`.

The meat has two independent parts. Membership in ``S_A`` is treated as
Poisson sampling with the fitted propensities, giving
``sum_A (1 - pi) psi psi'``. The reference-sample sums are treated with the
with-replacement approximation within strata.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import norm

from qbipw.data_model import NonProbSample, ProbSample
from qbipw.errors import EstimationError, IdentifiabilityError, InputError
from qbipw.propensity import Design, PropensityFit, gee_G, gee_jacobian, score_jacobian, score_U

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SandwichPieces:
    phi: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    meat_A: np.ndarray
    meat_B: np.ndarray
    av: float
    av_A: float
    av_B: float

    @property
    def se(self) -> float:
        return float(np.sqrt(max(self.av, 0.0)))


def _split(theta):
    theta = np.asarray(theta, dtype=float)
    return theta[0], theta[1:]


def _inv_pi(eta, Z):
    return 1.0 + np.exp(-(Z @ eta))


def stacked_phi(theta, y, design: Design, d, method="gee", version="ipw2", N=None, n_known=False):
    """Stacked estimating function at ``theta = (tau, eta)``.

    ``N`` defaults to ``design.N``. With ``version="ipw1"`` and
    ``n_known=False`` the population size in the mean row is the reference
    total ``sum_B d``.
    """
    tau, eta = _split(theta)
    N = design.N if N is None else float(N)
    inv = _inv_pi(eta, design.Z_A)
    if version == "ipw2":
        first = ((y - tau) @ inv) / N
    elif version == "ipw1":
        N_ref = N if n_known else float(np.sum(d))
        first = (y @ inv - tau * N_ref) / N
    else:
        raise InputError(f"unknown IPW version {version!r}")
    if method == "gee":
        rest = gee_G(eta, design.Z_A, design.Z_B, d)
    elif method == "mle":
        rest = score_U(eta, design.Z_A, design.Z_B, d)
    else:
        raise InputError(f"unknown method {method!r}")
    return np.concatenate([[first], rest])


def analytic_bread(theta, y, design: Design, d, method="gee", version="ipw2", N=None, n_known=False):
    """Jacobian of :func:`stacked_phi` with respect to ``(tau, eta)``."""
    tau, eta = _split(theta)
    N = design.N if N is None else float(N)
    Z_A = design.Z_A
    e = np.exp(-(Z_A @ eta))
    p = Z_A.shape[1]
    out = np.zeros((p + 1, p + 1))
    if version == "ipw2":
        out[0, 0] = -np.sum(1.0 + e) / N
        out[0, 1:] = -((y - tau) * e) @ Z_A / N
    else:
        N_ref = N if n_known else float(np.sum(d))
        out[0, 0] = -N_ref / N
        out[0, 1:] = -(y * e) @ Z_A / N
    if method == "gee":
        out[1:, 1:] = gee_jacobian(eta, Z_A, design.Z_B, d)
    else:
        out[1:, 1:] = score_jacobian(eta, Z_A, design.Z_B, d)
    return out


def numeric_bread(theta, y, design, d, method="gee", version="ipw2", N=None, n_known=False, rel_step=1e-6):
    """Central finite-difference Jacobian of :func:`stacked_phi`."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        f_up = stacked_phi(up, y, design, d, method, version, N, n_known)
        f_dn = stacked_phi(dn, y, design, d, method, version, N, n_known)
        cols.append((f_up - f_dn) / (2 * h))
    return np.column_stack(cols)


def with_replacement_cov(values, strata=None):
    """Design covariance of ``sum_k values_k`` under with-replacement sampling.

    ``values`` holds one weighted contribution ``d_k b_k`` per row. Strata
    with a single unit contribute nothing.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    labels = np.zeros(values.shape[0], dtype=np.int64) if strata is None else np.asarray(strata)
    p = values.shape[1]
    cov = np.zeros((p, p))
    for h in np.unique(labels):
        v = values[labels == h]
        n_h = v.shape[0]
        if n_h < 2:
            continue
        c = v - v.mean(axis=0)
        cov += n_h / (n_h - 1) * (c.T @ c)
    return cov


def sandwich(
    fit: PropensityFit,
    a: NonProbSample,
    b: ProbSample,
    design: Design,
    version="ipw2",
    N=None,
    n_known=False,
    bread="analytic",
) -> SandwichPieces:
    """Sandwich variance pieces for an IPW/QBIPW mean at a converged fit."""
    N = design.N if N is None else float(N)
    y = a.y
    d = b.d
    eta = fit.eta
    inv = 1.0 / fit.pi_A
    if version == "ipw2":
        tau = float((y @ inv) / inv.sum())
    elif version == "ipw1":
        N_ref = N if n_known else float(np.sum(d))
        tau = float((y @ inv) / N_ref)
    else:
        raise InputError(f"unknown IPW version {version!r}")
    theta = np.concatenate([[tau], eta])
    phi = stacked_phi(theta, y, design, d, fit.method, version, N, n_known)
    if bread == "analytic":
        J = analytic_bread(theta, y, design, d, fit.method, version, N, n_known)
    elif bread == "numeric":
        J = numeric_bread(theta, y, design, d, fit.method, version, N, n_known)
    else:
        raise InputError(f"unknown bread option {bread!r}")

    Z_A, Z_B = design.Z_A, design.Z_B
    # per-unit S_A contributions psi_k and S_B contributions b_k
    if version == "ipw2":
        psi0 = (y - tau) * inv / N
        b0 = np.zeros(b.n)
    else:
        psi0 = y * inv / N
        b0 = np.zeros(b.n) if n_known else np.full(b.n, tau / N)
    if fit.method == "gee":
        psi_rest = Z_A * inv[:, None]
        b_rest = Z_B
    else:
        psi_rest = Z_A
        b_rest = Z_B * fit.pi_B[:, None]
    psi = np.column_stack([psi0, psi_rest])
    bvals = np.column_stack([b0, b_rest]) * d[:, None]
    meat_A = (psi * (1.0 - fit.pi_A)[:, None]).T @ psi
    meat_B = with_replacement_cov(bvals, b.strata)

    try:
        Jinv = np.linalg.inv(J)
        singular = not np.all(np.isfinite(Jinv)) or np.linalg.cond(J) > 1e14
    except np.linalg.LinAlgError:
        singular = True
    if singular:
        _, _, vt = np.linalg.svd(J)
        labels = ["tau"] + list(design.names)
        worst = labels[int(np.argmax(np.abs(vt[-1])))]
        raise IdentifiabilityError(f"sandwich bread matrix is singular; deficient direction dominated by {worst}")
    row = Jinv[0]
    av_A = float(row @ meat_A @ row)
    av_B = float(row @ meat_B @ row)
    return SandwichPieces(phi, J, meat_A + meat_B, meat_A, meat_B, av_A + av_B, av_A, av_B)


def sandwich_variance(fit, a, b, design, version="ipw2", **kw) -> float:
    """Estimated variance of the IPW/QBIPW mean (non-negative)."""
    return max(sandwich(fit, a, b, design, version, **kw).av, 0.0)


def normal_ci(point, se, level=0.95):
    """``point -+ z se``; works elementwise on arrays."""
    if np.any(np.asarray(se) < 0):
        raise ValueError("se must be non-negative")
    z = norm.ppf(0.5 + level / 2.0)
    return point - z * se, point + z * se


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci_lower: float
    ci_upper: float
    replicates: np.ndarray
    n_failed: int
    failures: tuple = ()

    @property
    def B(self) -> int:
        return int(self.replicates.size)


def replicate_rng(seed, index):
    """Independent generator for replicate ``index``; stable in ``(seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def resample_pair(a: NonProbSample, b: ProbSample, rng):
    """One bootstrap draw: SRSWR of ``S_A`` and stratified SRSWR of ``S_B``."""
    idx_A = rng.integers(0, a.n, size=a.n)
    if b.strata is None:
        idx_B = rng.integers(0, b.n, size=b.n)
    else:
        parts = []
        for h in np.unique(b.strata):
            members = np.flatnonzero(b.strata == h)
            parts.append(members[rng.integers(0, members.size, size=members.size)])
        idx_B = np.concatenate(parts)
    return a.take(idx_A), b.take(idx_B)


def bootstrap_variance(
    estimator: Callable[[NonProbSample, ProbSample], float],
    a: NonProbSample,
    b: ProbSample,
    B: int = 500,
    seed: int = 0,
    workers: int = 1,
    level: float = 0.95,
    max_fail_share: float = 0.10,
) -> BootstrapResult:
    """Bootstrap standard error and percentile interval.

    ``estimator`` maps a resampled pair to a point estimate and must be safe
    to call from several threads. Replicates that raise are counted as
    failures; more than ``max_fail_share`` of them is an error.
    """
    if B < 2:
        raise InputError("bootstrap needs B >= 2")

    def one(r):
        rng = replicate_rng(seed, r)
        a_r, b_r = resample_pair(a, b, rng)
        try:
            return float(estimator(a_r, b_r)), None
        except Exception as exc:  # noqa: BLE001 - replicate failures are tallied
            return np.nan, f"replicate {r}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(B)))
    else:
        out = [one(r) for r in range(B)]
    values = np.array([v for v, _ in out])
    failures = tuple(m for _, m in out if m is not None)
    ok = values[np.isfinite(values)]
    n_failed = B - ok.size
    if n_failed > max_fail_share * B or ok.size < 2:
        raise EstimationError(f"{n_failed} of {B} bootstrap replicates failed")
    alpha = 1.0 - level
    lo, hi = np.quantile(ok, [alpha / 2, 1 - alpha / 2])
    return BootstrapResult(float(np.std(ok, ddof=1)), float(lo), float(hi), values, int(n_failed), failures)
