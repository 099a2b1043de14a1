import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from qbipw import EstimationError, InputError
from qbipw.simulation import (
    ScenarioConfig,
    constraint_quality,
    generate_population,
    om_linear_predictor,
    run_scenario,
    select_nonprob,
    select_prob,
    selection_probability,
    summarize,
    Draw,
    write_tables,
)

SMALL = dict(population_size=3000, prob_sample_size=200, estimators=("naive", "ipw-gee", "ipw-mle", "mi-glm"))


def test_outcome_and_selection_formulas():
    assert om_linear_predictor(1.5, 0.0, 0.0, "nonlinear") == 0.0
    assert expit(om_linear_predictor(0.0, 0.0, 0.0, "linear")) == pytest.approx(0.7311, abs=1e-4)
    assert selection_probability(1.5, 2.0, "PM2") == pytest.approx(expit(-3.0))
    assert selection_probability(1.5, 2.0, "PM2") == pytest.approx(0.04743, abs=1e-5)
    assert selection_probability(7.0, 0.0, "PM1") == 0.5
    with pytest.raises(InputError):
        selection_probability(0.0, 0.0, "PM3")


def test_population_moments_and_outcomes():
    N = 50_000
    pop = generate_population(N, 3)
    assert abs(pop["x1"].mean() - 1.0) < 3 / np.sqrt(N)
    assert abs(pop["x2"].mean() - 1.0) < 3 / np.sqrt(N)
    assert pop["x2"].min() >= 0
    np.testing.assert_allclose(pop["OM1"], 1 + pop["x1"] + pop["x2"] + pop["alpha"] + pop["eps"])
    assert set(np.unique(pop["OM3"])) <= {0.0, 1.0}
    assert pop.equals(generate_population(N, 3))
    assert not pop.equals(generate_population(N, 4))


def test_select_prob_census_and_no_duplicates():
    pop = generate_population(500, 1)
    b, idx = select_prob(pop, 500, 2)
    np.testing.assert_array_equal(b.d, 1.0)
    b, idx = select_prob(pop, 100, 2)
    assert len(np.unique(idx)) == 100 and np.all(b.d == 5.0)
    with pytest.raises(InputError):
        select_prob(pop, 501, 2)


def test_select_nonprob_empty_is_error():
    pop = generate_population(5, 1).assign(x2=-1e3)
    with pytest.raises(EstimationError):
        select_nonprob(pop, "PM1", 0)


def test_constraint_quality_naive_and_gee():
    pop = generate_population(5000, 1)
    rng = np.random.default_rng(1)
    a, _ = select_nonprob(pop, "PM1", rng)
    b, _ = select_prob(pop, 300, rng)
    q = constraint_quality(a, b)
    assert np.isnan(q.nu_N) and np.isnan(q.nu_tau) and q.nu_Q > 0
    # weights that match S_B exactly on every level give nu_Q = 0
    q_same = constraint_quality(a.__class__(b.X, np.zeros(b.n)), b, pi_A=1 / b.d)
    assert q_same.nu_Q == pytest.approx(0.0, abs=1e-12)
    assert q_same.nu_N == pytest.approx(0.0, abs=1e-9)


def test_truth_stub_estimator():
    cfg = ScenarioConfig(replications=8, master_seed=2, **{**SMALL, "estimators": ("naive",)})
    truth = float(generate_population(cfg.population_size, cfg.master_seed)[cfg.outcome_model].mean())
    res = run_scenario(cfg, custom={"oracle": lambda a, b: (truth, 0.5)})
    row = res.row("oracle")
    assert res.truth == truth
    assert (row.B, row.SE, row.RMSE, row.CR) == (0.0, 0.0, 0.0, 100.0)


def test_rmse_identity_and_signs():
    cfg = ScenarioConfig(replications=10, master_seed=3, **SMALL)
    res = run_scenario(cfg)
    for row in res.rows:
        assert row.RMSE == pytest.approx(np.hypot(row.B, row.SE), rel=1e-12)
    assert res.row("naive").B > 0
    res2 = run_scenario(ScenarioConfig(scenario="II", replications=10, master_seed=3, **SMALL))
    assert res2.row("naive").B < 0


def test_replicate_prefix_stability():
    full = run_scenario(ScenarioConfig(replications=6, master_seed=4, **SMALL)).raw
    half = run_scenario(ScenarioConfig(replications=3, master_seed=4, **SMALL)).raw
    pd.testing.assert_frame_equal(full[full["replicate"] < 3].reset_index(drop=True), half)


def test_mle_does_not_reproduce_totals():
    res = run_scenario(ScenarioConfig(replications=4, master_seed=5, **SMALL))
    assert res.row("ipw-mle").nu_N_median > 1e-3
    assert res.row("ipw-gee").nu_N_median < 1e-6


def test_summarize_excludes_nonconverged():
    draws = [Draw(1.0, 0.1, True), Draw(3.0, 0.1, True), Draw(message="failed")]
    row = summarize("x", draws, truth=2.0, scale=1.0)
    assert row.n_used == 2 and row.n_excluded == 1 and row.n_ci == 2
    assert row.B == 0.0 and row.SE == pytest.approx(np.sqrt(2.0))
    assert row.CR == 0.0


def test_config_validation():
    with pytest.raises(InputError):
        ScenarioConfig(scenario="V").validate()
    with pytest.raises(InputError):
        ScenarioConfig(estimators=("magic",)).validate()
    with pytest.raises(InputError):
        ScenarioConfig.at_scale("huge")
    cfg = ScenarioConfig.at_scale("paper")
    assert (cfg.population_size, cfg.prob_sample_size, cfg.replications) == (100_000, 1_000, 500)
    assert "threads" not in cfg.as_dict()


def test_write_tables_headers(tmp_path):
    res = run_scenario(ScenarioConfig(replications=3, master_seed=6, **SMALL))
    paths = write_tables(res, tmp_path)
    for path in paths.values():
        with open(path, encoding="utf-8") as fh:
            lines = [fh.readline() for _ in range(3)]
        assert lines[0].startswith("# qbipw ")
        assert lines[1].startswith("# config: {")
        assert lines[2] == "# seed: 6\n"
    t6 = pd.read_csv(paths["coverage"], comment="#")
    assert set(t6["estimator_id"]) == {"ipw-gee", "ipw-mle"}
