"""Simulation design with a predetermined treatment, and the Monte Carlo harness.

The design is::

    Y_it = alpha_i + gamma_t + theta1 Y_i,t-1 + theta2 D_it + eps_it
    D_it = rho D_i,t-1 + v_it

with ``corr(eps_i,t-1, v_it) = error_corr``, so ``D`` responds to last
period's shock and is predetermined but not strictly exogenous.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ABLassoError, BadParameter
from .panel import InstrumentMode, PanelData

log = logging.getLogger(__name__)

__all__ = [
    "DgpConfig",
    "simulate_dgp",
    "simulate_levels",
    "EstimatorSpec",
    "CoefficientSummary",
    "MonteCarloSummary",
    "monte_carlo",
    "rep_seed",
]


@dataclass(frozen=True)
class DgpConfig:
    rho: float = 0.5
    theta1: float = 0.8
    theta2: float = 1.0
    sigma_alpha: float = 1.0
    sigma_gamma: float = 1.0
    error_corr: float = 0.5
    burn_in: int = 10
    sigma_eps: float = 1.0
    seed: int | None = 0

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise BadParameter("|rho| must be below 1")
        if not abs(self.theta1) < 1:
            raise BadParameter("|theta1| must be below 1")
        if self.burn_in < 0:
            raise BadParameter("burn_in must be non-negative")
        if not -1 <= self.error_corr <= 1:
            raise BadParameter("error_corr must lie in [-1, 1]")
        if min(self.sigma_alpha, self.sigma_gamma, self.sigma_eps) < 0:
            raise BadParameter("standard deviations must be non-negative")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2])


def simulate_levels(cfg: DgpConfig, N: int, T: int, seed=None):
    """Outcome and treatment levels ``(Y, D)`` for periods 0..T, each (N, T+1).

    Both start at zero ``burn_in + 1`` periods before period 0.
    ``seed`` (an int or ``SeedSequence``) overrides ``cfg.seed``.
    """
    if N < 2 or T < 3:
        raise BadParameter("need N >= 2 and T >= 3")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    P = cfg.burn_in + T + 1  # periods after the zero start, the last T are kept plus Y_0
    alpha = cfg.sigma_alpha * rng.standard_normal(N)
    gamma = cfg.sigma_gamma * rng.standard_normal(P)
    z_eps = rng.standard_normal((N, P + 1))  # column 0 is the shock before the first period
    z_u = rng.standard_normal((N, P))
    rc = cfg.error_corr
    v = rc * z_eps[:, :-1] + np.sqrt(1.0 - rc * rc) * z_u
    eps = cfg.sigma_eps * z_eps[:, 1:]
    y = np.zeros((N, P + 1))
    d = np.zeros((N, P + 1))
    for s in range(1, P + 1):
        d[:, s] = cfg.rho * d[:, s - 1] + v[:, s - 1]
        y[:, s] = alpha + gamma[s - 1] + cfg.theta1 * y[:, s - 1] + cfg.theta2 * d[:, s] + eps[:, s - 1]
    keep = slice(P - T, P + 1)
    return y[:, keep], d[:, keep]


def simulate_dgp(cfg: DgpConfig, N: int, T: int, seed=None) -> PanelData:
    """Draw one panel with regressors ``(Y_{t-1}, D_t)`` over periods 1..T.

    ``Y`` and ``D`` start at zero ``burn_in + 1`` periods before period 1, so
    the lag column at period 1 holds a burn-in value ``Y_i0``; that level is
    never used as an instrument (``Y`` is first observed at period 1).
    ``seed`` (an int or ``SeedSequence``) overrides ``cfg.seed``.
    """
    y, d = simulate_levels(cfg, N, T, seed)
    regs = np.stack([y[:, :-1], d[:, 1:]], axis=2)
    return PanelData(
        outcome=y[:, 1:],
        regressors=regs,
        regressor_names=("y_lag1", "d"),
        instrument_modes=(InstrumentMode.PROJECT, InstrumentMode.PROJECT),
        outcome_lags=(1, None),
        first_observed_period=(1, None),
    )


# ---------------------------------------------------------------- Monte Carlo

METHODS = ("ab-lasso", "ab-lasso-ss", "ab-ols", "ab-ols-ss", "ab-gmm", "dab-ss", "oracle")


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator column of a Monte Carlo table."""

    method: str
    label: str | None = None
    K: int = 5
    n_splits: int = 100
    variance: str = "cross_fit"
    aggregation: str = "median"
    c: float = 1.0
    post_lasso: bool = True
    gmm_weight: str = "pinv"
    gmm_centre: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise BadParameter(f"unknown method {self.method!r}; choose from {METHODS}")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.method.endswith("-ss") and self.method != "dab-ss":
            return f"{self.method}(K={self.K})"
        return self.method


def run_estimator(spec: EstimatorSpec, panel: PanelData, truth, seed: int):
    """Point estimates and standard errors of ``spec`` on ``panel``."""
    from .estimator import CrossFitPlan, EstimatorConfig, FirstStageConfig, ab_lasso, ab_lasso_ss
    from .gmm import GmmConfig, ab_gmm_two_step, dab_ss

    if spec.method == "oracle":
        return np.asarray(truth, float), np.ones(len(truth))
    if spec.method in ("ab-gmm", "dab-ss"):
        gc = GmmConfig(weight=spec.gmm_weight, centre=spec.gmm_centre)
        res = ab_gmm_two_step(panel, gc) if spec.method == "ab-gmm" else dab_ss(panel, seed, gc)
        return res.theta, res.std_errors
    fs = FirstStageConfig(c=spec.c, post_lasso=spec.post_lasso,
                          method="ols" if spec.method.startswith("ab-ols") else "lasso")
    cfg = EstimatorConfig(first_stage=fs, variance=spec.variance)
    if spec.method.endswith("-ss"):
        plan = CrossFitPlan(K=spec.K, n_splits=spec.n_splits, seed=seed, aggregation=spec.aggregation)
        res = ab_lasso_ss(panel, plan, cfg)
    else:
        res = ab_lasso(panel, cfg)
    return res.theta, res.std_errors


def rep_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Seed of replication ``rep``; independent of execution order."""
    return np.random.SeedSequence([int(master_seed), int(rep)])


def _one_rep(args):
    cfg, N, T, specs, master_seed, rep = args
    ss = rep_seed(master_seed, rep)
    data_seed, split_seed = ss.spawn(2)
    panel = simulate_dgp(cfg, N, T, seed=data_seed)
    sseed = int(split_seed.generate_state(1)[0])
    out = []
    for spec in specs:
        try:
            theta, se = run_estimator(spec, panel, cfg.theta, sseed)
            if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(se))):
                raise ABLassoError("non-finite estimate")
            out.append((np.asarray(theta, float), np.asarray(se, float), None))
        except (ABLassoError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            out.append((None, None, f"{type(exc).__name__}: {exc}"))
    return rep, out


@dataclass(frozen=True)
class CoefficientSummary:
    """Raw (unnormalised) summary of one coefficient under one estimator."""

    truth: float
    bias: float
    std_dev: float
    rmse: float
    ci_length: float
    coverage: float

    def normalised(self) -> dict:
        s = abs(self.truth) if self.truth != 0 else 1.0
        return {"rmse": self.rmse / s, "std_dev": self.std_dev / s, "bias": self.bias / s,
                "ci_length": self.ci_length / s, "coverage": self.coverage}


def summarise(estimates, std_errors, truth: float, level: float = 0.95) -> CoefficientSummary:
    """Bias, population standard deviation, RMSE, mean CI length and coverage."""
    from scipy.special import ndtri

    e = np.asarray(estimates, float) - truth
    se = np.asarray(std_errors, float)
    z = float(ndtri(0.5 + level / 2))
    if e.size == 0:
        nan = float("nan")
        return CoefficientSummary(truth, nan, nan, nan, nan, nan)
    return CoefficientSummary(
        truth=float(truth),
        bias=float(e.mean()),
        std_dev=float(e.std()),
        rmse=float(np.sqrt(np.mean(e * e))),
        ci_length=float(np.mean(2 * z * se)),
        coverage=float(np.mean(np.abs(e) <= z * se)),
    )


METRICS = ("rmse", "std_dev", "bias", "ci_length", "coverage")


@dataclass(frozen=True, eq=False)
class MonteCarloSummary:
    """Per-estimator summaries plus every replication for audit.

    ``estimates[name]`` and ``std_errors[name]`` are (n_ok, d) arrays in
    replication order; ``failures[name]`` lists ``(rep, message)``.
    """

    config: DgpConfig
    N: int
    T: int
    n_reps: int
    master_seed: int
    coef_names: tuple
    specs: tuple
    summaries: dict
    estimates: dict = field(repr=False)
    std_errors: dict = field(repr=False)
    ok_reps: dict = field(repr=False)
    failures: dict = field(repr=False)

    @property
    def estimators(self) -> list:
        return [s.name for s in self.specs]

    def failure_rate(self, name: str) -> float:
        return len(self.failures[name]) / self.n_reps

    def table(self, normalised: bool = True) -> list:
        """Rows ``(coefficient, metric, value per estimator...)``."""
        rows = []
        for k, coef in enumerate(self.coef_names):
            for metric in METRICS:
                vals = []
                for name in self.estimators:
                    s = self.summaries[name][k]
                    vals.append(s.normalised()[metric] if normalised else getattr(s, metric))
                rows.append((coef, metric, *vals))
        for name in ("n_ok", "n_failed"):
            counts = [len(self.ok_reps[e]) if name == "n_ok" else len(self.failures[e]) for e in self.estimators]
            rows.append(("all", name, *counts))
        return rows

    def to_csv(self, normalised: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coefficient", "metric", *self.estimators])
        for row in self.table(normalised):
            w.writerow([row[0], row[1], *(_fmt(v) for v in row[2:])])
        return buf.getvalue()

    def reps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "estimator", "coefficient", "estimate", "std_error", "status"])
        for name in self.estimators:
            for row, rep in enumerate(self.ok_reps[name]):
                for k, coef in enumerate(self.coef_names):
                    w.writerow([rep, name, coef, _fmt(self.estimates[name][row, k]),
                                _fmt(self.std_errors[name][row, k]), "ok"])
            for rep, msg in self.failures[name]:
                w.writerow([rep, name, "", "", "", msg])
        return buf.getvalue()

    def to_dict(self) -> dict:
        out = {
            "dgp": asdict(self.config), "N": self.N, "T": self.T, "n_reps": self.n_reps,
            "master_seed": self.master_seed, "coefficients": list(self.coef_names), "estimators": {},
        }
        for spec in self.specs:
            name = spec.name
            out["estimators"][name] = {
                "spec": asdict(spec),
                "n_ok": len(self.ok_reps[name]),
                "n_failed": len(self.failures[name]),
                "failure_flag": self.failure_rate(name) > 0.01,
                "raw": {c: asdict(s) for c, s in zip(self.coef_names, self.summaries[name])},
                "normalised": {c: s.normalised() for c, s in zip(self.coef_names, self.summaries[name])},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if np.isfinite(v) else ""


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def monte_carlo(cfg: DgpConfig, N: int, T: int, specs: Sequence[EstimatorSpec], n_reps: int,
                master_seed: int = 0, workers: int = 1, progress=None) -> MonteCarloSummary:
    """Run every estimator on ``n_reps`` simulated panels.

    Replication ``r`` draws its data from ``rep_seed(master_seed, r)``, so the
    result does not depend on ``workers``. Failed estimates are excluded from
    that estimator's summary and listed in ``failures``.
    """
    if n_reps < 1:
        raise BadParameter("n_reps must be at least 1")
    specs = tuple(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise BadParameter(f"estimator labels must be unique: {names}")
    jobs = [(cfg, N, T, specs, master_seed, r) for r in range(n_reps)]
    results = [None] * n_reps
    if workers <= 1:
        for job in jobs:
            rep, out = _one_rep(job)
            results[rep] = out
            if progress:
                progress(rep)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rep, out in pool.map(_one_rep, jobs, chunksize=max(1, n_reps // (4 * workers))):
                results[rep] = out
                if progress:
                    progress(rep)

    coef_names = ("theta1", "theta2")
    truth = cfg.theta
    estimates, ses, oks, fails, summaries = {}, {}, {}, {}, {}
    for j, name in enumerate(names):
        th, se, ok, bad = [], [], [], []
        for rep in range(n_reps):
            theta, s, err = results[rep][j]
            if err is None:
                th.append(theta)
                se.append(s)
                ok.append(rep)
            else:
                bad.append((rep, err))
        th = np.array(th).reshape(-1, len(truth))
        se = np.array(se).reshape(-1, len(truth))
        estimates[name], ses[name], oks[name], fails[name] = th, se, ok, bad
        summaries[name] = [summarise(th[:, k], se[:, k], truth[k]) for k in range(len(truth))]
        if len(bad) > 0.01 * n_reps:
            log.warning("%s failed in %d of %d replications", name, len(bad), n_reps)
    return MonteCarloSummary(config=cfg, N=N, T=T, n_reps=n_reps, master_seed=master_seed,
                             coef_names=coef_names, specs=specs, summaries=summaries,
                             estimates=estimates, std_errors=ses, ok_reps=oks, failures=fails)
