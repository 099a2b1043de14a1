"""Monte Carlo harness for the two-covariate simulation design.

A finite population is generated once per master seed. Every replicate then
draws a Bernoulli non-probability sample and a simple random reference
sample from it and applies each estimator. Replicate ``r`` uses its own
``SeedSequence`` child, so results do not depend on the worker count or on
how many replicates are requested.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from qbipw.calibration import build_a_matrix, quantile_breaks_for, weighted_quantile
from qbipw.data_model import DECILES, QUARTILES, NonProbSample, ProbSample
from qbipw.errors import EstimationError, InputError, QBIPWError
from qbipw.estimators import dr_point, fit_outcome, ipw_mean, logistic_fit, mi_nn, spec_for
from qbipw.propensity import build_design, fit_propensity
from qbipw.variance import normal_ci, sandwich

log = logging.getLogger(__name__)

SCENARIOS = {
    "I": ("linear", "PM1"),
    "II": ("linear", "PM2"),
    "III": ("nonlinear", "PM1"),
    "IV": ("nonlinear", "PM2"),
}
OUTCOME_MODELS = {
    ("linear", "continuous"): "OM1",
    ("nonlinear", "continuous"): "OM2",
    ("linear", "binary"): "OM3",
    ("nonlinear", "binary"): "OM4",
}
SIM_ESTIMATORS = (
    "naive",
    "mi-nn",
    "mi-glm",
    "dr-mle",
    "dr-gee",
    "ipw-mle",
    "qbipw1-mle",
    "qbipw2-mle",
    "ipw-gee",
    "qbipw1-gee",
    "qbipw2-gee",
)
# estimators with an analytic variance (coverage is reported only for these)
IPW_FAMILY = ("ipw-mle", "qbipw1-mle", "qbipw2-mle", "ipw-gee", "qbipw1-gee", "qbipw2-gee")
QUALITY_LEVELS = tuple(sorted(set(DECILES) | set(QUARTILES)))
COLUMNS = ["x1", "x2"]
SCALES = {
    "desk": {"population_size": 20_000, "prob_sample_size": 500, "replications": 100},
    "paper": {"population_size": 100_000, "prob_sample_size": 1_000, "replications": 500},
}


def default_threads() -> int:
    env = os.environ.get("QBIPW_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "I"
    outcome: str = "continuous"
    population_size: int = 20_000
    prob_sample_size: int = 500
    replications: int = 100
    master_seed: int = 1
    estimators: tuple = SIM_ESTIMATORS
    version: str = "ipw2"
    nn_k: int = 5
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))

    @classmethod
    def at_scale(cls, scale: str, **kw) -> "ScenarioConfig":
        if scale not in SCALES:
            raise InputError(f"unknown scale {scale!r}; expected one of {', '.join(SCALES)}")
        return cls(**{**SCALES[scale], **kw})

    @property
    def outcome_form(self) -> str:
        return SCENARIOS[self.scenario][0]

    @property
    def selection_model(self) -> str:
        return SCENARIOS[self.scenario][1]

    @property
    def outcome_model(self) -> str:
        return OUTCOME_MODELS[(self.outcome_form, self.outcome)]

    def validate(self) -> "ScenarioConfig":
        if self.scenario not in SCENARIOS:
            raise InputError(f"unknown scenario {self.scenario!r}; expected one of I, II, III, IV")
        if self.outcome not in ("continuous", "binary"):
            raise InputError(f"unknown outcome type {self.outcome!r}")
        if not 1 <= self.prob_sample_size <= self.population_size:
            raise InputError("reference sample size must lie in [1, N]")
        if self.replications < 1:
            raise InputError("replications must be positive")
        if self.version not in ("ipw1", "ipw2"):
            raise InputError(f"unknown IPW version {self.version!r}")
        from qbipw.estimators import ESTIMATOR_IDS

        bad = [e for e in self.estimators if e not in ESTIMATOR_IDS]
        if bad:
            raise InputError(f"unknown estimators: {', '.join(bad)}")
        return self

    def as_dict(self, include_threads=False) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        out["outcome_model"] = self.outcome_model
        out["selection_model"] = self.selection_model
        if not include_threads:
            # output bytes must not depend on the worker count
            out.pop("threads")
        return out


def _rng(master_seed, *key):
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(key)))


def om_linear_predictor(x1, x2, alpha, form):
    if form == "linear":
        return 1.0 + x1 + x2 + alpha
    return 0.5 * (x1 - 1.5) ** 2 + x2**2 + alpha


def selection_probability(x1, x2, model):
    if model == "PM1":
        return expit(x2)
    if model == "PM2":
        return expit(-3.0 + (x1 - 1.5) ** 2 + (x2 - 2.0) ** 2)
    raise InputError(f"unknown selection model {model!r}")


def generate_population(N: int, seed) -> pd.DataFrame:
    """Finite population with covariates, latent terms and all four outcomes.

    ``seed`` is an integer master seed or a ``numpy.random.Generator``.
    Columns: ``x1, x2, alpha, eps, OM1, OM2, OM3, OM4`` plus the binary
    success probabilities ``p_OM3, p_OM4``.
    """
    if N < 1:
        raise InputError("population size must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed, 0)
    x1 = rng.normal(1.0, 1.0, N)
    # inverse CDF keeps the exponential stream independent of numpy's sampler internals
    x2 = -np.log1p(-rng.random(N))
    alpha = rng.normal(0.0, 1.0, N)
    eps = rng.normal(0.0, 1.0, N)
    u3 = rng.random(N)
    u4 = rng.random(N)
    p3 = expit(om_linear_predictor(x1, x2, alpha, "linear"))
    p4 = expit(om_linear_predictor(x1, x2, alpha, "nonlinear"))
    return pd.DataFrame(
        {
            "x1": x1,
            "x2": x2,
            "alpha": alpha,
            "eps": eps,
            "OM1": om_linear_predictor(x1, x2, alpha, "linear") + eps,
            "OM2": om_linear_predictor(x1, x2, alpha, "nonlinear") + eps,
            "OM3": (u3 < p3).astype(float),
            "OM4": (u4 < p4).astype(float),
            "p_OM3": p3,
            "p_OM4": p4,
        }
    )


def select_nonprob(frame: pd.DataFrame, model: str, seed, outcome: str = "OM1"):
    """Bernoulli selection with the given propensity model.

    Returns the sample and the selected population row indices.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = selection_probability(frame["x1"].to_numpy(), frame["x2"].to_numpy(), model)
    idx = np.flatnonzero(rng.random(len(frame)) < p)
    if idx.size == 0:
        raise EstimationError("non-probability selection produced an empty sample")
    X = frame[COLUMNS].to_numpy()[idx]
    return NonProbSample(X, frame[outcome].to_numpy()[idx], COLUMNS), idx


def select_prob(frame: pd.DataFrame, n: int, seed):
    """Simple random sample without replacement with weights ``N / n``."""
    N = len(frame)
    if not 1 <= n <= N:
        raise InputError("reference sample size must lie in [1, N]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(N, size=n, replace=False))
    X = frame[COLUMNS].to_numpy()[idx]
    return ProbSample(X, np.full(n, N / n), COLUMNS), idx


@dataclass(frozen=True)
class Quality:
    nu_N: float
    nu_Q: float
    nu_tau: float


def constraint_quality(a: NonProbSample, b: ProbSample, pi_A=None, levels=QUALITY_LEVELS) -> Quality:
    """Discrepancies between ``S_A``-weighted and reference-sample summaries.

    ``pi_A=None`` means unit weights (naive); then only the quantile
    discrepancy is defined and the others are NaN.
    """
    p = a.X.shape[1]
    w = np.ones(a.n) if pi_A is None else 1.0 / np.asarray(pi_A, float)
    sq = 0.0
    for j in range(p):
        for al in levels:
            sq += (weighted_quantile(w, a.X[:, j], al) - weighted_quantile(b.d, b.X[:, j], al)) ** 2
    nu_Q = float(np.sqrt(sq))
    if pi_A is None:
        return Quality(np.nan, nu_Q, np.nan)
    nu_N = float(abs(w.sum() - b.d.sum()))
    nu_tau = float(np.linalg.norm(w @ a.X - b.d @ b.X))
    return Quality(nu_N, nu_Q, nu_tau)


@dataclass(frozen=True)
class Draw:
    """One estimator applied to one replicate."""

    point: float = np.nan
    se: float = np.nan
    converged: bool = False
    nu_N: float = np.nan
    nu_Q: float = np.nan
    nu_tau: float = np.nan
    message: str = ""


def _ipw_draw(eid, a, b, version, cache):
    spec = spec_for(eid, a.X.shape[1])
    if eid.startswith("ipw-"):
        spec = spec.totals_only()
    method = eid.rsplit("-", 1)[1]
    try:
        design = build_design(a, b, spec)
        fit = fit_propensity(design, b.d, method)
    except QBIPWError as exc:
        return Draw(message=str(exc))
    cache[eid] = fit
    if not np.all(np.isfinite(fit.pi_A)) or np.any(fit.pi_A <= 0):
        return Draw(message=fit.message)
    q = constraint_quality(a, b, fit.pi_A)
    if not fit.converged:
        return Draw(nu_N=q.nu_N, nu_Q=q.nu_Q, nu_tau=q.nu_tau, message=fit.message)
    point = ipw_mean(a, fit, version, b.d.sum())
    try:
        se = sandwich(fit, a, b, design, version).se
    except QBIPWError as exc:
        log.debug("%s: sandwich failed: %s", eid, exc)
        se = np.nan
    return Draw(point, se, True, q.nu_N, q.nu_Q, q.nu_tau)


def run_replicate(pop: pd.DataFrame, cfg: ScenarioConfig, r: int, custom=None) -> dict:
    """All estimators on replicate ``r``; returns ``{estimator: Draw}``."""
    rng = _rng(cfg.master_seed, 1, r)
    a, _ = select_nonprob(pop, cfg.selection_model, rng, cfg.outcome_model)
    b, _ = select_prob(pop, cfg.prob_sample_size, rng)
    out = {}
    fits = {}
    # propensity fits first so the DR estimators can reuse them
    for eid in cfg.estimators:
        if eid in IPW_FAMILY:
            out[eid] = _ipw_draw(eid, a, b, cfg.version, fits)
    model = None
    for eid in cfg.estimators:
        if eid in out:
            continue
        try:
            if eid == "naive":
                q = constraint_quality(a, b)
                out[eid] = Draw(float(a.y.mean()), converged=True, nu_Q=q.nu_Q)
            elif eid == "mi-nn":
                out[eid] = Draw(mi_nn(a, b, cfg.nn_k), converged=True)
            elif eid in ("mi-glm", "dr-mle", "dr-gee"):
                if model is None:
                    model = fit_outcome(a, b, cfg.outcome)
                om, XA, XB = model
                m_B = om.predict(XB)
                if eid == "mi-glm":
                    out[eid] = Draw(float(b.d @ m_B / b.d.sum()), converged=True)
                else:
                    key = "ipw-" + eid.split("-")[1]
                    fit = fits.get(key)
                    if fit is None:
                        _ipw_draw(key, a, b, cfg.version, fits)
                        fit = fits.get(key)
                    if fit is None or not fit.converged:
                        out[eid] = Draw(message="propensity fit unavailable")
                    else:
                        out[eid] = Draw(dr_point(a, b, fit.pi_A, om.predict(XA), m_B), converged=True)
        except QBIPWError as exc:
            out[eid] = Draw(message=str(exc))
    for name, fn in (custom or {}).items():
        try:
            res = fn(a, b)
            point, se = (res if isinstance(res, tuple) else (res, np.nan))
            out[name] = Draw(float(point), float(se), True)
        except QBIPWError as exc:
            out[name] = Draw(message=str(exc))
    return out


@dataclass(frozen=True)
class MetricRow:
    estimator_id: str
    B: float
    SE: float
    RMSE: float
    CR: float
    ci_length: float
    nu_N_mean: float
    nu_N_median: float
    nu_Q_mean: float
    nu_Q_median: float
    nu_tau_mean: float
    nu_tau_median: float
    n_used: int
    n_excluded: int
    n_ci: int


def _nan_stat(fn, x):
    x = np.asarray(x, float)
    x = x[np.isfinite(x)]
    return float(fn(x)) if x.size else np.nan


def summarize(estimator_id, draws, truth, level=0.95, scale=100.0) -> MetricRow:
    """Monte Carlo metrics for one estimator; B, SE, RMSE and length times ``scale``."""
    pts = np.array([d.point for d in draws])
    ok = np.array([d.converged and np.isfinite(d.point) for d in draws])
    used = pts[ok]
    if used.size:
        B = float(used.mean() - truth)
        SE = float(used.std(ddof=1)) if used.size > 1 else 0.0
    else:
        B = SE = np.nan
    ses = np.array([d.se for d in draws])
    has_ci = ok & np.isfinite(ses)
    if has_ci.any():
        lo, hi = normal_ci(pts[has_ci], ses[has_ci], level)
        CR = float(np.mean((lo <= truth) & (truth <= hi)) * 100.0)
        length = float(np.mean(hi - lo) * scale)
    else:
        CR = length = np.nan
    return MetricRow(
        estimator_id,
        B * scale,
        SE * scale,
        float(np.hypot(B, SE)) * scale,
        CR,
        length,
        _nan_stat(np.mean, [d.nu_N for d in draws]),
        _nan_stat(np.median, [d.nu_N for d in draws]),
        _nan_stat(np.mean, [d.nu_Q for d in draws]),
        _nan_stat(np.median, [d.nu_Q for d in draws]),
        _nan_stat(np.mean, [d.nu_tau for d in draws]),
        _nan_stat(np.median, [d.nu_tau for d in draws]),
        int(ok.sum()),
        int((~ok).sum()),
        int(has_ci.sum()),
    )


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    truth: float
    rows: list
    raw: pd.DataFrame = field(repr=False)

    def row(self, estimator_id) -> MetricRow:
        for r in self.rows:
            if r.estimator_id == estimator_id:
                return r
        raise KeyError(estimator_id)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])


def run_scenario(cfg: ScenarioConfig, custom: Optional[Mapping[str, Callable]] = None, population=None) -> ScenarioResult:
    """Run all replicates of a scenario and summarise them per estimator.

    ``custom`` adds estimators given as callables ``(a, b) -> point`` or
    ``(a, b) -> (point, se)``. Replicates run on ``cfg.threads`` threads and
    are reduced in index order.
    """
    cfg.validate()
    pop = generate_population(cfg.population_size, cfg.master_seed) if population is None else population
    truth = float(pop[cfg.outcome_model].mean())

    def one(r):
        return run_replicate(pop, cfg, r, custom)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            reps = list(pool.map(one, range(cfg.replications)))
    else:
        reps = [one(r) for r in range(cfg.replications)]
    names = list(cfg.estimators) + list(custom or {})
    rows = [summarize(n, [rep[n] for rep in reps], truth) for n in names]
    raw = pd.DataFrame(
        [
            {"replicate": r, "estimator_id": n, **asdict(rep[n])}
            for r, rep in enumerate(reps)
            for n in names
        ]
    )
    failed = raw.loc[~raw["converged"]]
    for _, rec in failed.iterrows():
        log.info("replicate %d, %s excluded: %s", rec["replicate"], rec["estimator_id"], rec["message"])
    return ScenarioResult(cfg, truth, rows, raw)


def _header(cfg: ScenarioConfig, extra=None) -> str:
    from qbipw import __version__

    conf = cfg.as_dict()
    if extra:
        conf.update(extra)
    return (
        f"# qbipw {__version__}\n"
        f"# config: {json.dumps(conf, sort_keys=True)}\n"
        f"# seed: {cfg.master_seed}\n"
    )


def _write_csv(path, df, header):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
        df.to_csv(fh, index=False, lineterminator="\n")


def accuracy_frame(res: ScenarioResult) -> pd.DataFrame:
    t = res.table()
    return t[["estimator_id", "B", "SE", "RMSE", "n_used", "n_excluded"]]


def quality_frame(res: ScenarioResult) -> pd.DataFrame:
    t = res.table()
    keep = [e for e in t["estimator_id"] if e == "naive" or e in IPW_FAMILY]
    t = t[t["estimator_id"].isin(keep)]
    return t[
        ["estimator_id", "nu_N_mean", "nu_Q_mean", "nu_tau_mean", "nu_N_median", "nu_Q_median", "nu_tau_median"]
    ]


def coverage_frame(res: ScenarioResult) -> pd.DataFrame:
    t = res.table()
    t = t[t["n_ci"] > 0]
    return t[["estimator_id", "CR", "ci_length", "n_ci"]].rename(columns={"ci_length": "Length"})


def write_tables(res: ScenarioResult, out_dir, prefix=None) -> dict:
    """Write accuracy (B, SE, RMSE), constraint-quality and coverage CSVs plus raw replicate draws."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = res.config
    prefix = prefix or f"scenario{cfg.scenario}_{cfg.outcome}"
    header = _header(cfg, {"truth": res.truth})
    paths = {}
    for name, frame in (
        ("accuracy", accuracy_frame(res)),
        ("quality", quality_frame(res)),
        ("coverage", coverage_frame(res)),
        ("replicates", res.raw),
    ):
        path = os.path.join(out_dir, f"{prefix}_{name}.csv")
        _write_csv(path, frame, header)
        paths[name] = path
    return paths


def format_accuracy(res: ScenarioResult) -> str:
    t = res.table()
    lines = [f"{'estimator':<12} {'B':>9} {'SE':>9} {'RMSE':>9} {'CR':>7} {'used':>5}"]
    for _, r in t.iterrows():
        cr = "" if not np.isfinite(r["CR"]) else f"{r['CR']:.1f}"
        lines.append(f"{r['estimator_id']:<12} {r['B']:9.2f} {r['SE']:9.2f} {r['RMSE']:9.2f} {cr:>7} {r['n_used']:5d}")
    return "\n".join(lines)


# piecewise regression demo


def piecewise_data(n: int = 1000, seed: int = 1) -> pd.DataFrame:
    """Synthetic data for the piecewise-regression demo.

    ``X ~ U(0, 80)``, ``Y1 ~ N(1300 - (X - 40)^2, 300^2)`` and
    ``Y2 ~ Bernoulli(expit(-3 + (X - 1.5)^2 + e))`` with ``e ~ N(0, 0.5^2)``.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 80.0, n)
    y1 = rng.normal(1300.0 - (x - 40.0) ** 2, 300.0)
    p = expit(-3.0 + (x - 1.5) ** 2 + rng.normal(0.0, 0.5, n))
    y2 = (rng.random(n) < p).astype(float)
    return pd.DataFrame({"x": x, "y1": y1, "p": p, "y2": y2})


PIECEWISE_SETTINGS = {"x": (), "x+quartiles": QUARTILES, "x+deciles": DECILES}


def piecewise_design(x, levels):
    x = np.asarray(x, float).reshape(-1, 1)
    d = np.ones(x.shape[0])
    breaks = quantile_breaks_for(x, d, [(0, levels)]) if levels else []
    A = build_a_matrix(x, breaks, float(x.shape[0]), intercept=False)
    return np.column_stack([np.ones(x.shape[0]), x, A])


def piecewise_fits(df: pd.DataFrame):
    """Linear and logistic fits for every design setting.

    Returns ``(summary, predictions)``: in-sample MSE and deviance per
    setting, and a frame of fitted values.
    """
    summary = []
    preds = {"x": df["x"].to_numpy(), "y1": df["y1"].to_numpy(), "y2": df["y2"].to_numpy()}
    y1, y2 = df["y1"].to_numpy(), df["y2"].to_numpy()
    for name, levels in PIECEWISE_SETTINGS.items():
        Z = piecewise_design(df["x"], levels)
        beta, *_ = np.linalg.lstsq(Z, y1, rcond=None)
        m = Z @ beta
        gamma = logistic_fit(Z, y2, on_separation="warn")
        t = Z @ gamma
        # log_expit keeps the exp(-t) tails that 1 - expit(t) rounds away
        dev = math.fsum(-2.0 * (y2 * log_expit(t) + (1 - y2) * log_expit(-t)))
        summary.append({"setting": name, "mse": float(np.mean((y1 - m) ** 2)), "deviance": dev})
        preds[f"m_{name}"] = m
        preds[f"p_{name}"] = expit(Z @ gamma)
    return pd.DataFrame(summary), pd.DataFrame(preds)
