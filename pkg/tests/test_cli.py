import json

import numpy as np
import pandas as pd
import pytest

from qbipw import __version__
from qbipw.cli import encode_covariates, main

from conftest import make_pair


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    a, b, _ = make_pair(seed=1, N=10_000, n_B=400)
    nonprob = pd.DataFrame(a.X, columns=["x1", "x2"]).assign(y=a.y)
    prob = pd.DataFrame(b.X, columns=["x1", "x2"]).assign(d=b.d)
    prob["region"] = np.where(prob["x1"] > 1, "north", "south")
    nonprob["region"] = np.where(nonprob["x1"] > 1, "north", "south")
    paths = {"nonprob": tmp / "nonprob.csv", "prob": tmp / "prob.csv", "dir": tmp}
    nonprob.to_csv(paths["nonprob"], index=False)
    prob.to_csv(paths["prob"], index=False)
    return paths


def _pair_args(files, *extra):
    return [
        "--nonprob", str(files["nonprob"]),
        "--prob", str(files["prob"]),
        "--y", "y",
        "--x", "x1,x2",
        "--weight", "d",
        *extra,
    ]


def _run(capsys, argv):
    code = main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_estimate_naive(files, capsys):
    code, out, _ = _run(capsys, ["estimate", *_pair_args(files, "--estimator", "naive")])
    assert code == 0
    res = json.loads(out)
    y = pd.read_csv(files["nonprob"])["y"]
    assert res["point"] == pytest.approx(y.mean(), rel=1e-12)
    assert res["se"] is None
    assert res["meta"]["version"] == __version__ and res["meta"]["seed"] == 1


def test_estimate_qbipw1_gee_residuals(files, capsys):
    code, out, _ = _run(capsys, ["estimate", *_pair_args(files, "--estimator", "qbipw1-gee")])
    assert code == 0
    res = json.loads(out)
    assert res["diagnostics"]["converged"]
    assert max(res["diagnostics"]["constraint_residuals"].values()) < 1e-8
    assert res["se"] > 0 and res["ci"][0] < res["point"] < res["ci"][1]
    assert res["nu"]["nu_N"] <= 1e-6 * 10_000


def test_estimate_custom_quantiles_and_out_file(files, capsys, tmp_path):
    out_path = tmp_path / "res.json"
    argv = ["estimate", *_pair_args(files, "--quantiles", "x2:0.25,0.5,0.75", "--out", str(out_path))]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    res = json.loads(out)
    assert res["estimator_id"] == "qbipw-gee"
    assert any("@q0.5" in k for k in res["diagnostics"]["constraint_residuals"])
    assert json.loads(out_path.read_text()) == res


def test_estimate_bootstrap_with_audit_csv(files, capsys, tmp_path):
    boot = tmp_path / "boot.csv"
    argv = [
        "estimate",
        *_pair_args(files, "--estimator", "ipw-gee", "--variance", "bootstrap", "--boot-reps", "30"),
        "--boot-out", str(boot), "--threads", "2",
    ]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    res = json.loads(out)
    assert res["variance_method"] == "bootstrap" and res["diagnostics"]["bootstrap"]["B"] == 30
    text = boot.read_text()
    assert text.startswith(f"# qbipw {__version__}\n# config: ")
    assert len(pd.read_csv(boot, comment="#")) == 30


def test_estimate_missing_weight(files, capsys):
    argv = ["estimate", "--nonprob", str(files["nonprob"]), "--prob", str(files["prob"]), "--y", "y", "--x", "x1"]
    code, _, err = _run(capsys, argv)
    assert code == 1
    assert "weight column required for probability sample" in err


def test_estimate_unknown_column(files, capsys):
    code, _, err = _run(capsys, ["estimate", *_pair_args(files, "--x", "x1,zz")])
    assert code == 1 and "zz" in err


def test_estimate_factor_encoding(files, capsys):
    code, out, _ = _run(capsys, ["estimate", *_pair_args(files, "--x", "x2,region", "--factor", "region")])
    assert code == 0
    assert "region=south" in json.loads(out)["diagnostics"]["constraint_residuals"]


def test_encode_covariates_reference_coding():
    frames = {
        "a": pd.DataFrame({"g": ["b", "a", "c"], "x": [1.0, 2.0, 3.0]}),
        "b": pd.DataFrame({"g": ["c", "a"], "x": [0.0, 1.0]}),
    }
    out, names = encode_covariates(frames, ["x", "g"], ["g"])
    assert names == ["x", "g=b", "g=c"]
    np.testing.assert_array_equal(out["a"], [[1, 1, 0], [2, 0, 0], [3, 0, 1]])


def test_estimate_config_file_precedence(files, capsys, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"estimator": "naive", "method": "mle"}))
    code, out, _ = _run(capsys, ["estimate", "--config", str(conf), *_pair_args(files)])
    assert json.loads(out)["estimator_id"] == "naive"
    code, out, _ = _run(capsys, ["estimate", "--config", str(conf), *_pair_args(files, "--estimator", "ipw-gee")])
    res = json.loads(out)
    assert res["estimator_id"] == "ipw-gee" and res["meta"]["config"]["method"] == "mle"
    conf.write_text(json.dumps({"bogus": 1}))
    code, _, err = _run(capsys, ["estimate", "--config", str(conf), *_pair_args(files)])
    assert code == 1 and "bogus" in err


def test_simulate_twice_identical_and_large_scale(tmp_path, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        argv = ["simulate", "--scenario", "I", "--outcome", "continuous", "--reps", "4", "--seed", "1",
                "--pop-size", "3000", "--prob-size", "200", "--estimators", "naive,ipw-gee", "--out-dir", str(d)]
        code, out, _ = _run(capsys, argv)
        assert code == 0 and "naive" in out
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1] and len(outs[0]) == 4
    from qbipw.cli import scenario_config

    cfg = scenario_config({"scenario": "II", "outcome": "binary", "scale": "paper", "reps": None, "seed": 3,
                           "pop_size": None, "prob_size": None, "estimators": None, "version": "ipw2",
                           "threads": None})
    assert (cfg.population_size, cfg.prob_sample_size, cfg.replications) == (100_000, 1_000, 500)


def test_simulate_unknown_scenario(capsys, tmp_path):
    code, _, err = _run(capsys, ["simulate", "--scenario", "V", "--out-dir", str(tmp_path)])
    assert code == 1 and "V" in err


def _calib_sample(tmp_path):
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"x": rng.gamma(2.0, 1.0, 80), "z": rng.normal(size=80), "d": rng.uniform(5, 15, 80)})
    path = tmp_path / "sample.csv"
    df.to_csv(path, index=False)
    return df, path


def test_calibrate_targets_met_and_doubled(tmp_path, capsys):
    df, path = _calib_sample(tmp_path)
    tx = float(df["d"] @ df["x"])
    out = tmp_path / "w.csv"
    code, text, _ = _run(capsys, ["calibrate", "--sample", str(path), "--weight", "d", "--totals", f"x={tx!r}",
                                  "--out", str(out)])
    assert code == 0
    w = pd.read_csv(out, comment="#")
    np.testing.assert_allclose(w["w"], df["d"], rtol=1e-12)
    code, text, _ = _run(capsys, ["calibrate", "--sample", str(path), "--weight", "d", "--totals", f"x={2 * tx!r}"])
    table = pd.read_csv(pd.io.common.StringIO(text), comment="#")
    assert table.loc[0, "achieved"] == pytest.approx(2 * tx, rel=1e-12)
    assert text.startswith(f"# qbipw {__version__}\n")


def test_calibrate_collinear_exit_2(tmp_path, capsys):
    df, path = _calib_sample(tmp_path)
    df["x2"] = 2 * df["x"]
    df.to_csv(path, index=False)
    code, _, err = _run(capsys, ["calibrate", "--sample", str(path), "--weight", "d", "--totals", "x=100,x2=200"])
    assert code == 2
    assert "rank report" in err and "nullity=1" in err


def test_calibrate_diagnose_round_trip(tmp_path, capsys):
    df, path = _calib_sample(tmp_path)
    N = float(df["d"].sum()) * 1.1
    out = tmp_path / "w.csv"
    common = ["--sample", str(path), "--weight", "d", "--totals", "z=3.5", "--quantile-targets", "x:0.25=1.0,0.5=1.7",
              "--pop-size", repr(N)]
    code, text1, _ = _run(capsys, ["calibrate", *common, "--out", str(out)])
    assert code == 0
    code, text2, _ = _run(capsys, ["diagnose", *common, "--weights", str(out)])
    assert code == 0
    t1 = pd.read_csv(pd.io.common.StringIO(text1), comment="#")
    t2 = pd.read_csv(pd.io.common.StringIO(text2), comment="#")
    assert list(t1["constraint"]) == list(t2["constraint"])
    np.testing.assert_allclose(t1["achieved"], t2["achieved"], rtol=0, atol=1e-10)
    assert t1["abs_error"].max() < 1e-8


def test_diagnose_gee_and_mle(files, capsys):
    code, out, _ = _run(capsys, ["diagnose", *_pair_args(files, "--estimator", "ipw-gee")])
    assert code == 0 and "B1 [PASS]" in out and "B2 [PASS]" in out
    vals = dict(line.split("=", 1) for line in out.splitlines() if line.startswith("nu_"))
    assert float(vals["nu_N"]) <= 1e-6 and float(vals["nu_tau"]) <= 1e-6
    code, out, _ = _run(capsys, ["diagnose", *_pair_args(files, "--estimator", "ipw-mle")])
    vals = dict(line.split("=", 1) for line in out.splitlines() if line.startswith("nu_"))
    assert code == 0 and float(vals["nu_tau"]) > 1e-6


def test_diagnose_rank_deficient_names_nullity(files, tmp_path, capsys):
    for key in ("nonprob", "prob"):
        df = pd.read_csv(files[key])
        df["x1b"] = df["x1"]
        df.to_csv(tmp_path / f"{key}.csv", index=False)
    argv = ["diagnose", "--nonprob", str(tmp_path / "nonprob.csv"), "--prob", str(tmp_path / "prob.csv"),
            "--x", "x1,x2,x1b", "--weight", "d", "--estimator", "ipw-gee"]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    assert "B1 [FAIL]" in out and "nullity=1" in out


def test_piecewise_command(tmp_path, capsys):
    out = tmp_path / "r2.csv"
    code, text, _ = _run(capsys, ["piecewise", "--n", "300", "--seed", "2", "--out", str(out)])
    assert code == 0 and "x+deciles" in text
    assert out.read_text().startswith("# qbipw")


def test_version_and_no_command(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out
    assert main([]) == 1
