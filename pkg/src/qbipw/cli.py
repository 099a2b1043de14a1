"""Command-line interface: ``qbipw estimate | simulate | calibrate | diagnose | piecewise``.

Every option may also come from a JSON file given with ``--config``; the
precedence is flag > file > built-in default. Exit codes: 0 success, 1 input
or configuration error, 2 estimation failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from typing import Optional

import numpy as np
import pandas as pd

from qbipw import __version__
from qbipw.calibration import (
    a_column,
    breaks_at,
    calibrate_quantiles,
    calibrate_totals,
    interpolated_cdf,
)
from qbipw.data_model import NonProbSample, ProbSample, validate_pair
from qbipw.errors import EstimationError, IdentifiabilityError, InputError, QBIPWError
from qbipw.estimators import ESTIMATOR_IDS, estimate, spec_for
from qbipw.propensity import build_design, check_identifiability, fit_propensity
from qbipw.simulation import (
    SCALES,
    SCENARIOS,
    SIM_ESTIMATORS,
    ScenarioConfig,
    constraint_quality,
    default_threads,
    format_accuracy,
    piecewise_data,
    piecewise_fits,
    run_scenario,
    write_tables,
)
from qbipw.variance import bootstrap_variance, normal_ci, sandwich

log = logging.getLogger("qbipw")

DEFAULTS = {
    "estimate": {
        "nonprob": None,
        "prob": None,
        "y": None,
        "x": None,
        "weight": None,
        "quantiles": [],
        "method": "gee",
        "estimator": None,
        "variance": "analytic",
        "boot_reps": 500,
        "seed": 1,
        "pop_size": None,
        "strata": None,
        "factor": [],
        "version": "ipw2",
        "outcome": None,
        "threads": None,
        "out": None,
        "boot_out": None,
    },
    "simulate": {
        "scenario": "I",
        "outcome": "continuous",
        "reps": None,
        "seed": 1,
        "scale": "desk",
        "pop_size": None,
        "prob_size": None,
        "estimators": None,
        "version": "ipw2",
        "threads": None,
        "out_dir": "sim_out",
    },
    "calibrate": {
        "sample": None,
        "weight": None,
        "totals": None,
        "quantile_targets": [],
        "pop_size": None,
        "out": None,
    },
    "diagnose": {
        "nonprob": None,
        "prob": None,
        "y": None,
        "x": None,
        "weight": None,
        "quantiles": [],
        "method": "gee",
        "estimator": None,
        "pop_size": None,
        "factor": [],
        "strata": None,
        "sample": None,
        "weights": None,
        "totals": None,
        "quantile_targets": [],
    },
    "piecewise": {"n": 1000, "seed": 1, "out": None},
}


class _Parser(argparse.ArgumentParser):
    """Argument errors are input errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(message)


def _recorded(config: dict) -> dict:
    # the worker count must not change output bytes
    return {k: v for k, v in config.items() if k != "threads"}


def _header(config: dict) -> str:
    seed = config.get("seed", config.get("master_seed"))
    return (
        f"# qbipw {__version__}\n"
        f"# config: {json.dumps(_recorded(config), sort_keys=True, default=str)}\n"
        + (f"# seed: {seed}\n" if seed is not None else "# seed: none (deterministic)\n")
    )


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    """Merge flags over the JSON config file over defaults."""
    conf = dict(DEFAULTS[cmd])
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_conf) - set(conf)
        if unknown:
            raise InputError(f"unknown config keys for {cmd}: {', '.join(sorted(unknown))}")
        conf.update(file_conf)
    for key in conf:
        val = getattr(args, key, None)
        if val is not None and val != []:
            conf[key] = val
    return conf


def _read_csv(path, what):
    if not path:
        raise InputError(f"{what} CSV path required")
    try:
        return pd.read_csv(path, comment="#")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot read {what} file {path}: {exc}") from exc


def _split_list(value):
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out += _split_list(v)
        return out
    return [s.strip() for s in str(value).split(",") if s.strip()]


def _numeric(df, col, where):
    if col not in df.columns:
        raise InputError(f"column {col!r} not found in {where}")
    vals = pd.to_numeric(df[col], errors="coerce")
    if vals.isna().any():
        bad = int(np.flatnonzero(vals.isna().to_numpy())[0])
        raise InputError(f"column {col!r} in {where} has a missing or non-numeric value at row {bad}")
    return vals.to_numpy(dtype=float)


def encode_covariates(frames: dict, x_cols, factors):
    """Numeric matrices for every frame; ``factors`` are one-hot coded.

    The first level (in sorted order over all frames) is the reference and
    dropped. Returns ``(matrices, names)``.
    """
    factors = set(factors)
    unknown = factors - set(x_cols)
    if unknown:
        raise InputError(f"--factor columns not listed in --x: {', '.join(sorted(unknown))}")
    names, blocks = [], {k: [] for k in frames}
    for col in x_cols:
        if col in factors:
            for where, df in frames.items():
                if col not in df.columns:
                    raise InputError(f"column {col!r} not found in {where}")
            levels = sorted(set().union(*(df[col].astype(str).unique() for df in frames.values())))
            for lev in levels[1:]:
                names.append(f"{col}={lev}")
                for where, df in frames.items():
                    blocks[where].append((df[col].astype(str) == lev).to_numpy(dtype=float))
        else:
            names.append(col)
            for where, df in frames.items():
                blocks[where].append(_numeric(df, col, where))
    mats = {k: np.column_stack(v) if v else np.empty((len(frames[k]), 0)) for k, v in blocks.items()}
    return mats, names


def parse_quantiles(items, names):
    """``["x2:0.25,0.5,0.75", ...]`` to ``((column_index, alphas), ...)``."""
    out = []
    for item in _split_quantile_items(items):
        if ":" not in item:
            raise InputError(f"quantile spec {item!r} must look like 'col:alpha,alpha,...'")
        col, levels = item.split(":", 1)
        col = col.strip()
        if col not in names:
            raise InputError(f"quantile column {col!r} is not a numeric covariate in --x")
        try:
            alphas = tuple(float(v) for v in levels.split(",") if v.strip())
        except ValueError as exc:
            raise InputError(f"bad quantile levels in {item!r}") from exc
        out.append((names.index(col), alphas))
    return tuple(out)


def _split_quantile_items(items):
    if items is None:
        return []
    if isinstance(items, str):
        items = [items]
    return list(items)


def _load_pair(conf, need_y=True):
    if conf.get("weight") in (None, ""):
        raise InputError("weight column required for probability sample")
    for key in ("nonprob", "prob", "x"):
        if not conf.get(key):
            raise InputError(f"--{key} is required")
    if need_y and not conf.get("y"):
        raise InputError("--y is required")
    dfA = _read_csv(conf["nonprob"], "non-probability sample")
    dfB = _read_csv(conf["prob"], "probability sample")
    x_cols = _split_list(conf["x"])
    mats, names = encode_covariates({"non-probability sample": dfA, "probability sample": dfB}, x_cols, _split_list(conf["factor"]))
    y = _numeric(dfA, conf["y"], "non-probability sample") if conf.get("y") else np.zeros(len(dfA))
    d = _numeric(dfB, conf["weight"], "probability sample")
    strata = None
    if conf.get("strata"):
        if conf["strata"] not in dfB.columns:
            raise InputError(f"column {conf['strata']!r} not found in probability sample")
        strata = pd.factorize(dfB[conf["strata"]].astype(str), sort=True)[0]
    a = NonProbSample(mats["non-probability sample"], y, names)
    b = ProbSample(mats["probability sample"], d, names, strata)
    qc = parse_quantiles(conf["quantiles"], names)
    return a, b, names, qc


def _estimator_and_spec(conf, names, qc, p):
    eid = conf.get("estimator")
    method = conf["method"]
    if method not in ("mle", "gee"):
        raise InputError(f"unknown method {method!r}; expected mle or gee")
    label = None
    if eid is None:
        eid = f"qbipw1-{method}" if qc else f"ipw-{method}"
        label = f"qbipw-{method}" if qc else eid
    if eid not in ESTIMATOR_IDS:
        raise InputError(f"unknown estimator {eid!r}; choose from {', '.join(ESTIMATOR_IDS)}")
    spec = spec_for(eid, p, quantile_columns=qc or None, population_size=conf.get("pop_size"))
    if qc and not eid.startswith("qbipw"):
        log.warning("--quantiles ignored for estimator %s", eid)
    return eid, label or eid, spec


def _check_pair(a, b, spec):
    problems = validate_pair(a, b, spec)
    if problems:
        raise InputError("; ".join(problems))


def cmd_estimate(conf) -> int:
    a, b, names, qc = _load_pair(conf)
    eid, label, spec = _estimator_and_spec(conf, names, qc, len(names))
    _check_pair(a, b, spec)
    version = conf["version"]
    res = estimate(eid, a, b, spec, version=version, outcome_kind=conf.get("outcome"))
    out = {"estimator_id": label, "point": res.point, "se": None, "ci": None, "variance_method": None}
    diag = dict(res.diagnostics)
    if res.fit is not None:
        fit = res.fit
        diag["converged"] = fit.converged
        diag["constraint_residuals"] = dict(zip(fit.names, map(float, fit.constraint_residuals)))
        q = constraint_quality(a, b, fit.pi_A)
        out["nu"] = {"nu_N": q.nu_N, "nu_Q": q.nu_Q, "nu_tau": q.nu_tau}
    variance = conf["variance"]
    if variance == "analytic":
        if res.fit is not None and eid.split("-")[0] in ("ipw", "qbipw1", "qbipw2"):
            pieces = sandwich(res.fit, a, b, res.design, version)
            se = pieces.se
            out.update(se=se, ci=list(normal_ci(res.point, se)), variance_method="analytic")
        elif eid != "naive":
            diag["variance_note"] = "no analytic variance for this estimator; use --variance bootstrap"
    elif variance == "bootstrap":
        threads = conf.get("threads") or default_threads()

        def closure(a_r, b_r):
            return estimate(eid, a_r, b_r, spec, version=version, outcome_kind=conf.get("outcome")).point

        boot = bootstrap_variance(closure, a, b, B=int(conf["boot_reps"]), seed=int(conf["seed"]), workers=threads)
        out.update(se=boot.se, ci=[boot.ci_lower, boot.ci_upper], variance_method="bootstrap")
        diag["bootstrap"] = {"B": boot.B, "failed": boot.n_failed}
        if conf.get("boot_out"):
            rep = pd.DataFrame({"replicate": np.arange(boot.B), "estimate": boot.replicates})
            _write_csv(conf["boot_out"], rep, _header(conf))
    else:
        raise InputError(f"unknown variance method {variance!r}")
    out["diagnostics"] = diag
    out["meta"] = {"version": __version__, "config": _recorded(conf), "seed": conf["seed"]}
    text = json.dumps(out, indent=2, default=_json_default)
    if conf.get("out"):
        with open(conf["out"], "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _write_csv(path, df, header):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        df.to_csv(fh, index=False, lineterminator="\n")


def scenario_config(conf) -> ScenarioConfig:
    """Resolved simulate options to a validated :class:`ScenarioConfig`."""
    scen = conf["scenario"]
    if scen not in SCENARIOS:
        raise InputError(f"unknown scenario {scen!r}; expected one of {', '.join(SCENARIOS)}")
    if conf["scale"] not in SCALES:
        raise InputError(f"unknown scale {conf['scale']!r}")
    kw = dict(scenario=scen, outcome=conf["outcome"], master_seed=int(conf["seed"]), version=conf["version"])
    if conf.get("reps") is not None:
        kw["replications"] = int(conf["reps"])
    if conf.get("pop_size") is not None:
        kw["population_size"] = int(conf["pop_size"])
    if conf.get("prob_size") is not None:
        kw["prob_sample_size"] = int(conf["prob_size"])
    if conf.get("estimators"):
        kw["estimators"] = tuple(_split_list(conf["estimators"]))
    kw["threads"] = int(conf["threads"]) if conf.get("threads") else default_threads()
    return ScenarioConfig.at_scale(conf["scale"], **kw).validate()


def cmd_simulate(conf) -> int:
    cfg = scenario_config(conf)
    res = run_scenario(cfg)
    paths = write_tables(res, conf["out_dir"])
    print(_header(cfg.as_dict()), end="")
    print(f"# truth: {res.truth!r}")
    print(format_accuracy(res))
    for name, path in paths.items():
        print(f"# wrote {name}: {path}")
    return 0


def parse_totals(text, names):
    out = []
    for item in _split_list(text):
        if "=" not in item:
            raise InputError(f"total spec {item!r} must look like 'col=value'")
        col, val = item.split("=", 1)
        if col not in names:
            raise InputError(f"column {col!r} not found in sample")
        try:
            out.append((col, float(val)))
        except ValueError as exc:
            raise InputError(f"bad total value in {item!r}") from exc
    return out


def parse_quantile_targets(items, names):
    """``["x2:0.25=1.3,0.5=2.0", ...]`` to ``[(col, alpha, Q), ...]``."""
    out = []
    for item in _split_quantile_items(items):
        if ":" not in item:
            raise InputError(f"quantile target {item!r} must look like 'col:alpha=Q,...'")
        col, rest = item.split(":", 1)
        col = col.strip()
        if col not in names:
            raise InputError(f"column {col!r} not found in sample")
        for part in _split_list(rest):
            if "=" not in part:
                raise InputError(f"quantile target {part!r} must look like 'alpha=Q'")
            al, q = part.split("=", 1)
            try:
                al, q = float(al), float(q)
            except ValueError as exc:
                raise InputError(f"bad quantile target {part!r}") from exc
            if not 0 < al < 1:
                raise InputError(f"quantile level out of (0,1): {al}")
            out.append((col, al, q))
    return out


def _calibration_problem(df, conf):
    """Constraint matrix, targets and labels for the calibrate/diagnose commands."""
    totals = parse_totals(conf.get("totals"), list(df.columns))
    qtargets = parse_quantile_targets(conf.get("quantile_targets"), list(df.columns))
    if not totals and not qtargets:
        raise InputError("at least one of --totals or --quantile-targets is required")
    d = _numeric(df, conf["weight"], "sample") if conf.get("weight") else None
    n = len(df)
    cols, targets, labels, checks = [], [], [], []
    N = conf.get("pop_size")
    if N is None and qtargets:
        N = float(d.sum()) if d is not None else float(n)
    if N is not None:
        cols.append(np.ones(n))
        targets.append(float(N))
        labels.append("N")
        checks.append(("total", None, None))
    for col, value in totals:
        cols.append(_numeric(df, col, "sample"))
        targets.append(value)
        labels.append(f"total({col})")
        checks.append(("total", col, None))
    for col, al, q in qtargets:
        x = _numeric(df, col, "sample")
        brk = breaks_at(x, q, al)
        cols.append(a_column(x, brk, float(N)))
        targets.append(al)
        labels.append(f"F({col};{q:g})@{al:g}")
        checks.append(("quantile", col, q))
    return np.column_stack(cols), np.array(targets), labels, checks, N


def constraint_table(df, w, labels, targets, checks, N) -> pd.DataFrame:
    """Achieved value of every constraint, recomputed from the raw columns."""
    rows = []
    for lab, tgt, (kind, col, q) in zip(labels, targets, checks):
        if kind == "total":
            achieved = float(np.sum(w)) if col is None else float(w @ _numeric(df, col, "sample"))
        else:
            x = _numeric(df, col, "sample")
            # interpolated CDF is relative to the weight sum; rescale to the population size
            achieved = float(interpolated_cdf(w, x, q) * np.sum(w) / N)
        rows.append({"constraint": lab, "target": float(tgt), "achieved": achieved, "abs_error": abs(achieved - tgt)})
    return pd.DataFrame(rows)


def _print_table(df, header):
    buf = io.StringIO()
    df.to_csv(buf, index=False, lineterminator="\n")
    print(header + buf.getvalue(), end="")


def cmd_calibrate(conf) -> int:
    if not conf.get("weight"):
        raise InputError("weight column required for probability sample")
    df = _read_csv(conf["sample"], "sample")
    d = _numeric(df, conf["weight"], "sample")
    M, targets, labels, checks, N = _calibration_problem(df, conf)
    has_q = any(kind == "quantile" for kind, _, _ in checks)
    w = (calibrate_quantiles if has_q else calibrate_totals)(d, M, targets, labels)
    header = _header(conf)
    out = pd.DataFrame({"row_id": np.arange(len(df)), "d": d, "w": w})
    if conf.get("out"):
        _write_csv(conf["out"], out, header)
    table = constraint_table(df, w, labels, targets, checks, N)
    _print_table(table, header)
    return 0


def _diagnose_weights(conf) -> int:
    df = _read_csv(conf["sample"], "sample")
    wdf = _read_csv(conf["weights"], "weights")
    if "w" not in wdf.columns or len(wdf) != len(df):
        raise InputError("weights file must have a 'w' column with one row per sample row")
    w = _numeric(wdf, "w", "weights")
    M, targets, labels, checks, N = _calibration_problem(df, conf)
    table = constraint_table(df, w, labels, targets, checks, N)
    _print_table(table, _header(conf))
    return 0


def cmd_diagnose(conf) -> int:
    if conf.get("weights"):
        return _diagnose_weights(conf)
    a, b, names, qc = _load_pair(conf, need_y=False)
    eid, label, spec = _estimator_and_spec(conf, names, qc, len(names))
    if not (eid.startswith("ipw") or eid.startswith("qbipw") or eid.startswith("dr")):
        spec = spec_for("ipw-" + conf["method"], len(names), population_size=conf.get("pop_size"))
    if eid.startswith("ipw") or eid.startswith("dr"):
        spec = spec.totals_only()
    _check_pair(a, b, spec)
    design = build_design(a, b, spec)
    print(_header(conf), end="")
    print(f"design columns: {', '.join(design.names)}")
    for which, Z in (("B1", design.Z_A), ("B2", design.Z_B)):
        rep = check_identifiability(Z, which, design.names)
        verdict = "PASS" if rep.ok else "FAIL"
        print(f"{which} [{verdict}] rank={rep.rank} dim={rep.dim} nullity={rep.nullity}: {rep.message}")
    method = eid.rsplit("-", 1)[1] if "-" in eid else conf["method"]
    try:
        fit = fit_propensity(design, b.d, method)
    except IdentifiabilityError as exc:
        print(f"fit ({method}) skipped: {exc}")
        return 0
    q = constraint_quality(a, b, fit.pi_A)
    print(f"fit ({method}): converged={fit.converged} iterations={fit.iterations} message={fit.message}")
    print(f"nu_N={q.nu_N!r}")
    print(f"nu_Q={q.nu_Q!r}")
    print(f"nu_tau={q.nu_tau!r}")
    return 0


def cmd_piecewise(conf) -> int:
    df = piecewise_data(int(conf["n"]), int(conf["seed"]))
    summary, preds = piecewise_fits(df)
    header = _header(conf)
    if conf.get("out"):
        _write_csv(conf["out"], preds, header)
    _print_table(summary, header)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qbipw", description="Quantile-balancing IPW estimators for non-probability samples.")
    p.add_argument("--version", action="version", version=f"qbipw {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common_pair(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--nonprob", help="CSV of the non-probability sample")
        sp.add_argument("--prob", help="CSV of the probability sample")
        sp.add_argument("--y", help="outcome column in the non-probability sample")
        sp.add_argument("--x", help="comma-separated covariate columns")
        sp.add_argument("--weight", help="design-weight column in the probability sample")
        sp.add_argument("--quantiles", action="append", help="'col:alpha,alpha,...' (repeatable)")
        sp.add_argument("--method", choices=["mle", "gee"])
        sp.add_argument("--estimator", help=f"one of {', '.join(ESTIMATOR_IDS)}")
        sp.add_argument("--pop-size", dest="pop_size", type=float)
        sp.add_argument("--factor", action="append", help="categorical covariate (repeatable)")
        sp.add_argument("--strata", help="stratum column in the probability sample")

    e = sub.add_parser("estimate", help="estimate a population mean")
    common_pair(e)
    e.add_argument("--variance", choices=["analytic", "bootstrap"])
    e.add_argument("--boot-reps", dest="boot_reps", type=int)
    e.add_argument("--boot-out", dest="boot_out", help="CSV for per-replicate bootstrap estimates")
    e.add_argument("--seed", type=int)
    e.add_argument("--version", dest="version", choices=["ipw1", "ipw2"])
    e.add_argument("--outcome", choices=["continuous", "binary"])
    e.add_argument("--threads", type=int)
    e.add_argument("--out")

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    s.add_argument("--config")
    s.add_argument("--scenario")
    s.add_argument("--outcome", choices=["continuous", "binary"])
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--scale")
    s.add_argument("--pop-size", dest="pop_size", type=int)
    s.add_argument("--prob-size", dest="prob_size", type=int)
    s.add_argument("--estimators", help=f"comma-separated subset of {', '.join(SIM_ESTIMATORS)}")
    s.add_argument("--version", dest="version", choices=["ipw1", "ipw2"])
    s.add_argument("--threads", type=int, help="worker threads (default: QBIPW_THREADS or CPU count)")
    s.add_argument("--out-dir", dest="out_dir")

    c = sub.add_parser("calibrate", help="chi-square calibration to totals and quantiles")
    c.add_argument("--config")
    c.add_argument("--sample")
    c.add_argument("--weight")
    c.add_argument("--totals", help="'col=value,col=value'")
    c.add_argument("--quantile-targets", dest="quantile_targets", action="append", help="'col:alpha=Q,alpha=Q' (repeatable)")
    c.add_argument("--pop-size", dest="pop_size", type=float)
    c.add_argument("--out")

    dg = sub.add_parser("diagnose", help="constraint-quality metrics and identifiability gates")
    common_pair(dg)
    dg.add_argument("--sample", help="calibrated sample (weights mode)")
    dg.add_argument("--weights", help="weights CSV written by 'calibrate'")
    dg.add_argument("--totals")
    dg.add_argument("--quantile-targets", dest="quantile_targets", action="append")

    r = sub.add_parser("piecewise", help="piecewise-regression demo; writes predictions")
    r.add_argument("--config")
    r.add_argument("--n", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    return p


COMMANDS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "diagnose": cmd_diagnose,
    "piecewise": cmd_piecewise,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if not args.command:
            parser.print_help(sys.stderr)
            return 1
        conf = _resolve(args.command, args)
        return COMMANDS[args.command](conf)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IdentifiabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"rank report: rank={exc.rank} dim={exc.dim} nullity={exc.nullity} dependent={exc.dependent}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except QBIPWError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
