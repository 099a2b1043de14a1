import numpy as np
import pytest

from qbipw import BalanceSpec, EstimationError, IdentifiabilityError, InputError, NonProbSample, ProbSample
from qbipw.estimators import estimate, qbipw_mean
from qbipw.propensity import build_design, gee_G, score_U
from qbipw.simulation import generate_population, select_nonprob, select_prob
from qbipw.variance import (
    analytic_bread,
    bootstrap_variance,
    normal_ci,
    numeric_bread,
    replicate_rng,
    resample_pair,
    sandwich,
    sandwich_variance,
    stacked_phi,
    with_replacement_cov,
)

from conftest import make_pair, small_random_pair


def _fitted(eid="qbipw1-gee", seed=1):
    # quantile constraints can be infeasible when S_A covers most of a tail;
    # seed 1 gives a pair where every fit below has a finite root
    a, b, _ = make_pair(seed=seed, N=10_000, n_B=400)
    res = estimate(eid, a, b)
    assert res.fit.converged
    return a, b, res


def test_normal_ci_examples():
    lo, hi = normal_ci(0.0, 1.0, 0.95)
    assert round(lo, 3) == -1.96 and round(hi, 3) == 1.96
    assert normal_ci(2.5, 0.0) == (2.5, 2.5)
    with pytest.raises(ValueError):
        normal_ci(0.0, -1.0)


@pytest.mark.parametrize("eid", ["ipw-gee", "qbipw1-gee", "ipw-mle", "qbipw1-mle"])
def test_stacked_phi_vanishes_and_is_linear_in_tau(eid):
    a, b, res = _fitted(eid)
    fit, des = res.fit, res.design
    theta = np.concatenate([[res.point], fit.eta])
    phi = stacked_phi(theta, a.y, des, b.d, fit.method)
    assert abs(phi[0]) < 1e-10
    G = (gee_G if fit.method == "gee" else score_U)(fit.eta, des.Z_A, des.Z_B, b.d)
    np.testing.assert_array_equal(phi[1:], G)
    if fit.method == "gee":
        assert np.max(np.abs(phi[1:]) / np.maximum(1.0, np.abs(des.Z_B.T @ b.d))) < 1e-6
    delta = 0.37
    shifted = stacked_phi(theta + np.eye(theta.size)[0] * delta, a.y, des, b.d, fit.method)
    np.testing.assert_array_equal(shifted[1:], phi[1:])
    assert shifted[0] - phi[0] == pytest.approx(-delta * np.sum(1 / fit.pi_A) / des.N, rel=1e-10)


@pytest.mark.parametrize("method", ["gee", "mle"])
@pytest.mark.parametrize("version", ["ipw1", "ipw2"])
@pytest.mark.parametrize("n_known", [False, True])
def test_analytic_bread_matches_finite_differences(method, version, n_known):
    a, b, res = _fitted(f"qbipw1-{method}")
    theta = np.concatenate([[res.point], res.fit.eta])
    args = (theta, a.y, res.design, b.d, method, version, None, n_known)
    J = analytic_bread(*args)
    Jn = numeric_bread(*args)
    assert np.max(np.abs(J - Jn)) / np.max(np.abs(J)) < 1e-5


def test_constant_outcome_has_zero_variance():
    a, b, _ = _fitted()
    a_c = NonProbSample(a.X, np.full(a.n, 3.0))
    res = estimate("qbipw1-gee", a_c, b)
    assert sandwich_variance(res.fit, a_c, b, res.design) <= 1e-10


def test_duplicating_reference_rows_changes_only_B_component():
    a, b, res = _fitted("ipw-gee")
    b2 = ProbSample(np.vstack([b.X, b.X]), np.concatenate([b.d, b.d]) / 2.0, b.column_names)
    res2 = estimate("ipw-gee", a, b2)
    assert res2.point == pytest.approx(res.point, rel=1e-10)
    s1 = sandwich(res.fit, a, b, res.design)
    s2 = sandwich(res2.fit, a, b2, res2.design)
    assert s2.av_A == pytest.approx(s1.av_A, rel=1e-8)
    assert s2.av_B != pytest.approx(s1.av_B, rel=1e-3)


def test_sandwich_pieces_invariants():
    a, b, res = _fitted()
    s = sandwich(res.fit, a, b, res.design)
    k = res.design.n_cols + 1
    assert s.bread.shape == (k, k) and s.meat.shape == (k, k)
    np.testing.assert_allclose(s.meat, s.meat.T, atol=1e-12 * np.abs(s.meat).max())
    assert np.min(np.linalg.eigvalsh(s.meat)) > -1e-9 * np.abs(s.meat).max()
    assert s.av >= 0 and s.se == pytest.approx(np.sqrt(s.av))


def test_singular_bread_names_direction():
    a, b, res = _fitted("ipw-gee")
    des = res.design
    bad = des.__class__(
        np.column_stack([des.Z_A, des.Z_A[:, 1]]),
        np.column_stack([des.Z_B, des.Z_B[:, 1]]),
        des.names + ["x1_copy"],
        des.breaks,
        des.N,
        des.n_x + 1,
    )
    fit = res.fit.__class__(
        **{**res.fit.__dict__, "eta": np.concatenate([res.fit.eta, [0.0]]), "names": bad.names}
    )
    with pytest.raises(IdentifiabilityError) as err:
        sandwich(fit, a, b, bad)
    assert "x1" in str(err.value)


def test_with_replacement_cov_matches_numpy():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(40, 3))
    n = v.shape[0]
    np.testing.assert_allclose(with_replacement_cov(v), n * np.cov(v, rowvar=False), rtol=1e-12)
    strata = np.repeat([0, 1], 20)
    expect = sum(20 * np.cov(v[strata == h], rowvar=False) for h in (0, 1))
    np.testing.assert_allclose(with_replacement_cov(v, strata), expect, rtol=1e-12)


def test_sandwich_se_matches_monte_carlo_sd():
    # repeated sampling from one fixed population is an independent oracle
    pop = generate_population(20_000, 5)
    pts, ses = [], []
    for r in range(200):
        rng = np.random.default_rng([5, r])
        a, _ = select_nonprob(pop, "PM1", rng)
        b, _ = select_prob(pop, 500, rng)
        res = estimate("ipw-gee", a, b)
        pts.append(res.point)
        ses.append(sandwich(res.fit, a, b, res.design).se)
    sd = np.std(pts, ddof=1)
    assert np.mean(ses) == pytest.approx(sd, rel=0.2)


def test_bootstrap_constant_and_determinism():
    rng = np.random.default_rng(1)
    a, b = small_random_pair(rng)
    const = bootstrap_variance(lambda a_, b_: 1.5, a, b, B=50, seed=1)
    assert const.se == 0.0 and const.ci_lower == const.ci_upper == 1.5
    fn = lambda a_, b_: estimate("ipw-gee", a_, b_).point  # noqa: E731
    r1 = bootstrap_variance(fn, a, b, B=60, seed=7)
    r2 = bootstrap_variance(fn, a, b, B=60, seed=7)
    r4 = bootstrap_variance(fn, a, b, B=60, seed=7, workers=4)
    assert (r1.se, r1.ci_lower, r1.ci_upper) == (r2.se, r2.ci_lower, r2.ci_upper)
    assert r1.replicates.tobytes() == r4.replicates.tobytes()
    r3 = bootstrap_variance(fn, a, b, B=60, seed=8)
    assert r3.se != r1.se


def test_bootstrap_failure_threshold():
    rng = np.random.default_rng(2)
    a, b = small_random_pair(rng)

    # fails whenever the first resampled outcome is positive, about half the time
    def flaky(a_, b_):
        if float(a_.y[0]) > 0:
            raise EstimationError("boom")
        return 0.0

    with pytest.raises(EstimationError):
        bootstrap_variance(flaky, a, b, B=40, seed=0)
    res = bootstrap_variance(lambda a_, b_: float(a_.y.mean()), a, b, B=40, seed=0)
    assert res.n_failed == 0 and res.B == 40
    with pytest.raises(InputError):
        bootstrap_variance(lambda a_, b_: 0.0, a, b, B=1)


def test_resample_pair_respects_strata_and_sizes():
    X = np.arange(10.0).reshape(-1, 1)
    a = NonProbSample(X[:4], np.arange(4.0))
    b = ProbSample(X, np.ones(10), strata=np.array([0] * 3 + [1] * 7))
    a_r, b_r = resample_pair(a, b, replicate_rng(3, 0))
    assert a_r.n == 4 and b_r.n == 10
    assert np.sum(b_r.X[:, 0] < 3) == 3
    a_s, b_s = resample_pair(a, b, replicate_rng(3, 0))
    assert np.array_equal(a_s.X, a_r.X) and np.array_equal(b_s.X, b_r.X)


def test_ipw1_known_N_variance_differs():
    # with unequal d the estimated size sum_B d has design variance; with SRS it has none
    a, b, _ = _fitted("ipw-gee")
    d = np.random.default_rng(4).uniform(0.5, 1.5, b.n) * b.d
    b = ProbSample(b.X, d, b.column_names)
    spec = BalanceSpec(total_columns=(0, 1))
    res = qbipw_mean(a, b, spec, "gee", "ipw1")
    des = build_design(a, b, spec)
    v_est = sandwich(res.fit, a, b, des, "ipw1").av
    v_known = sandwich(res.fit, a, b, des, "ipw1", n_known=True).av
    assert v_est > 0 and v_known > 0
    assert v_est != pytest.approx(v_known, rel=1e-3)
