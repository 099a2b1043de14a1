"""Newton's method with a double-dogleg trust region for square systems.

Follows the global strategy of Dennis & Schnabel (1996, alg. A6.4.4) applied
to the merit function ``f(x) = ||F(x)||^2 / 2``. When the trust region
collapses without progress, a backtracking line search along the Newton
direction is tried before giving up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SolverResult:
    x: np.ndarray
    fvec: np.ndarray
    converged: bool
    iterations: int
    message: str
    history: list = field(default_factory=list)

    @property
    def residual_norm(self) -> float:
        return float(np.max(np.abs(self.fvec))) if self.fvec.size else 0.0


def _dogleg_step(newton, grad, jac, delta):
    """Double-dogleg step of length at most ``delta``."""
    n_norm = np.linalg.norm(newton)
    if n_norm <= delta:
        return newton, "newton"
    g_norm2 = grad @ grad
    Jg = jac @ grad
    Jg2 = Jg @ Jg
    if Jg2 == 0.0 or g_norm2 == 0.0:
        return newton * (delta / n_norm), "scaled-newton"
    cauchy = -(g_norm2 / Jg2) * grad
    # -g' s_N equals ||F||^2 for the Gauss-Newton model
    gs = -(grad @ newton)
    gamma = g_norm2 * g_norm2 / (Jg2 * gs) if gs > 0 else 1.0
    eta = 0.2 + 0.8 * min(gamma, 1.0)
    if eta * n_norm <= delta:
        return newton * (delta / n_norm), "scaled-newton"
    c_norm = np.linalg.norm(cauchy)
    if c_norm >= delta:
        return cauchy * (delta / c_norm), "steepest"
    target = eta * newton
    v = target - cauchy
    a = v @ v
    b = 2.0 * (cauchy @ v)
    c = c_norm * c_norm - delta * delta
    disc = b * b - 4.0 * a * c
    if not (np.isfinite(disc) and a > 0):
        return cauchy * (delta / c_norm), "steepest"
    lam = (-b + np.sqrt(disc)) / (2.0 * a)
    return cauchy + lam * v, "dogleg"


def solve_system(
    fun,
    jac,
    x0,
    tol=1e-8,
    max_iter=100,
    max_norm=None,
    norm_scale=None,
    step_tol=1e-6,
):
    """Find a root of ``fun`` starting from ``x0``.

    Parameters
    ----------
    fun, jac : callable
        Residual vector and its Jacobian as functions of ``x``.
    tol : float
        Convergence threshold on ``max |F(x)|``.
    step_tol : float
        The Newton step at the accepted point must also be below
        ``step_tol * (1 + max |x|)``.
    max_iter : int
        Maximum number of accepted Newton iterations.
    max_norm : float, optional
        Abort with a divergence message when ``||x * norm_scale||`` exceeds it.

    Returns
    -------
    SolverResult
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _solve(fun, jac, x0, tol, max_iter, max_norm, norm_scale, step_tol)


def _solve(fun, jac, x0, tol, max_iter, max_norm, norm_scale, step_tol):
    x = np.array(x0, dtype=float)
    scale = np.ones_like(x) if norm_scale is None else np.asarray(norm_scale, dtype=float)
    F = fun(x)
    f = 0.5 * (F @ F)
    delta = None
    history = []
    for it in range(1, max_iter + 1):
        J = jac(x)
        singular = False
        try:
            newton = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            singular = True
            newton = np.linalg.lstsq(J, -F, rcond=None)[0]
        if not np.all(np.isfinite(newton)):
            return SolverResult(x, F, False, it - 1, "singular Jacobian", history)
        # a small residual alone is not enough: along a direction of recession
        # the residual decays while the root runs off to infinity, and once it
        # underflows the Jacobian is singular too
        if singular and np.max(np.abs(F)) < tol:
            return SolverResult(x, F, False, it - 1, "singular Jacobian at vanishing residual (no finite root)", history)
        if np.max(np.abs(F)) < tol and np.max(np.abs(newton)) <= step_tol * (1.0 + np.max(np.abs(x))):
            return SolverResult(x, F, True, it - 1, "converged", history)
        grad = J.T @ F
        if delta is None:
            delta = np.linalg.norm(newton)
        accepted = False
        while delta > 1e-14 * max(1.0, np.linalg.norm(x)):
            step, kind = _dogleg_step(newton, grad, J, delta)
            x_new = x + step
            F_new = fun(x_new)
            f_new = 0.5 * (F_new @ F_new)
            model = F + J @ step
            pred = f - 0.5 * (model @ model)
            ared = f - f_new
            if np.isfinite(f_new) and f_new <= f + 1e-4 * (grad @ step):
                ratio = ared / pred if pred > 0 else 0.0
                if ratio > 0.75 and np.linalg.norm(step) >= 0.99 * delta:
                    delta = 2.0 * delta
                elif ratio < 0.1:
                    delta = 0.5 * delta
                accepted = True
                break
            # quadratic backtrack on the radius, as in Dennis & Schnabel
            slope = grad @ step
            denom = 2.0 * (f_new - f - slope) if np.isfinite(f_new) else np.inf
            s_norm = np.linalg.norm(step)
            shrink = -slope * s_norm / denom if denom > 0 and np.isfinite(denom) else 0.1 * s_norm
            delta = min(max(shrink, 0.1 * s_norm), 0.5 * s_norm)
        if not accepted:
            x_new, F_new, f_new, ok = _line_search(fun, x, F, f, newton, grad)
            if not ok:
                stalled = np.max(np.abs(F))
                return SolverResult(x, F, False, it - 1, f"stalled at max|F|={stalled:.3e}", history)
            kind = "line-search"
            delta = np.linalg.norm(x_new - x)
        x, F, f = x_new, F_new, f_new
        history.append((it, kind, float(np.max(np.abs(F)))))
        if max_norm is not None and np.linalg.norm(x * scale) > max_norm:
            return SolverResult(x, F, False, it, "divergence: coefficients unbounded (separation)", history)
    J = jac(x)
    try:
        newton = np.linalg.solve(J, -F)
    except np.linalg.LinAlgError:
        newton = np.full_like(x, np.inf)
    converged = bool(
        np.max(np.abs(F)) < tol and np.max(np.abs(newton)) <= step_tol * (1.0 + np.max(np.abs(x)))
    )
    msg = "converged" if converged else "maximum iterations reached"
    return SolverResult(x, F, converged, max_iter, msg, history)


def _line_search(fun, x, F, f, direction, grad):
    slope = grad @ direction
    if not slope < 0:
        return x, F, f, False
    lam = 1.0
    while lam > 1e-10:
        x_new = x + lam * direction
        F_new = fun(x_new)
        f_new = 0.5 * (F_new @ F_new)
        if np.isfinite(f_new) and f_new <= f + 1e-4 * lam * slope:
            return x_new, F_new, f_new, True
        lam *= 0.5
    return x, F, f, False
