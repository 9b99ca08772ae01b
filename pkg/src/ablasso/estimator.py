"""AB-LASSO and its cross-fitted version AB-LASSO-SS.

Both estimators run a LASSO first stage per period on lagged levels, then a
just-identified IV regression of the differenced outcome on the differenced
regressors using the first-stage predictions as instruments. Inference uses
a sandwich variance whose middle matrix keeps the lag-one cross terms coming
from the MA(1) structure of differenced errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from . import lasso as _lasso
from .errors import BadParameter, BadPlan, FirstStageError, ShapeError, SingularDesign, UnitRootError
from .panel import (
    InstrumentMode,
    PanelData,
    TransformedPanel,
    _check_units,
    build_instrument_matrix,
    difference_and_demean,
)

log = logging.getLogger(__name__)

__all__ = [
    "FirstStageConfig",
    "EstimatorConfig",
    "CrossFitPlan",
    "PeriodFit",
    "FirstStageFits",
    "EstimateResult",
    "LongRunEffect",
    "fit_first_stage",
    "predict_first_stage",
    "iv_second_stage",
    "projected_sandwich",
    "sandwich_variance",
    "ab_lasso",
    "ab_lasso_ss",
    "long_run_effects",
]

COND_LIMIT = 1e12


@dataclass(frozen=True)
class FirstStageConfig:
    """First-stage settings.

    ``method="ols"`` replaces LASSO by OLS on every instrument (the AB-OLS
    comparison); ``post_lasso`` refits OLS on the LASSO support.
    """

    c: float = 1.0
    alpha_mass: float = 0.1
    lag_weighting: str = "uniform"
    post_lasso: bool = True
    method: str = "lasso"
    tol: float = 1e-8
    max_sweeps: int = 10_000

    def __post_init__(self):
        if self.method not in ("lasso", "ols"):
            raise BadParameter(f"unknown first-stage method {self.method!r}")
        if self.lag_weighting not in ("uniform", "distance"):
            raise BadParameter(f"unknown lag weighting {self.lag_weighting!r}")


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by the AB-LASSO family.

    ``variance`` only matters for AB-LASSO-SS:

    * ``"cross_fit"``: for every split, stack the fold-level cross-fitted
      instruments and transformed data of all N units, plug in residuals at
      the aggregated estimate, and average the covariances over splits.
    * ``"last_split"``: the same, using the last split only.
    * ``"full_refit"``: refit the first stage on the full sample.
    """

    first_stage: FirstStageConfig = field(default_factory=FirstStageConfig)
    confidence_level: float = 0.95
    variance: str = "cross_fit"

    def __post_init__(self):
        if not 0.0 < self.confidence_level < 1.0:
            raise BadParameter("confidence_level must be in (0, 1)")
        if self.variance not in ("cross_fit", "last_split", "full_refit"):
            raise BadParameter(f"unknown variance mode {self.variance!r}")


@dataclass(frozen=True)
class CrossFitPlan:
    """K-fold cross-fitting repeated over ``n_splits`` random unit permutations."""

    K: int = 5
    n_splits: int = 1
    seed: int = 0
    aggregation: str = "median"

    def __post_init__(self):
        if self.K < 2:
            raise BadPlan("K must be at least 2")
        if self.n_splits < 1:
            raise BadPlan("n_splits must be at least 1")
        if self.aggregation not in ("median", "mean"):
            raise BadPlan(f"unknown aggregation {self.aggregation!r}")

    def validate(self, n_units: int):
        if n_units // self.K < 2:
            raise BadPlan(f"K={self.K} folds of N={n_units} units leave a fold with fewer than 2 units")

    def splits(self, n_units: int) -> list:
        """Fold assignments: one list of K index arrays per split.

        Folds are contiguous blocks of a seeded permutation; sizes differ by at
        most one, with the larger folds first.
        """
        self.validate(n_units)
        rng = np.random.default_rng(self.seed)
        out = []
        for _ in range(self.n_splits):
            perm = rng.permutation(n_units)
            out.append([np.sort(f) for f in np.array_split(perm, self.K)])
        return out


@dataclass(frozen=True, eq=False)
class PeriodFit:
    """First-stage fit for one period.

    ``theta`` stacks one coefficient row (intercept first) per projected
    regressor, so it is ``d_proj x m_t``.
    """

    period: int
    columns: tuple
    theta: np.ndarray
    penalty: float
    weights: np.ndarray
    n_sweeps: tuple = ()

    def support(self, row: int) -> tuple:
        return tuple(int(j) for j in np.flatnonzero(self.theta[row, 1:]) + 1)


@dataclass(frozen=True, eq=False)
class FirstStageFits:
    periods: tuple
    projected: tuple
    fit_units: np.ndarray
    config: FirstStageConfig

    def period(self, t: int) -> PeriodFit:
        return self.periods[t - 2]

    def support_summary(self, names: Sequence[str]) -> list:
        rows = []
        for pf in self.periods:
            row = {"t": pf.period, "m_t": len(pf.columns), "penalty": pf.penalty}
            for r, j in enumerate(self.projected):
                row[f"support_{names[j]}"] = len(pf.support(r))
            rows.append(row)
        return rows


class LongRunEffect(NamedTuple):
    label: str
    estimate: float
    std_error: float


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """Point estimates with sandwich covariance and Wald intervals.

    ``covariance`` is the finite-sample covariance of ``theta`` (the
    asymptotic variance divided by ``N T``).
    """

    theta: np.ndarray
    covariance: np.ndarray
    names: tuple
    method: str
    confidence_level: float = 0.95
    residuals: np.ndarray | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)
    long_run: tuple = ()
    metadata: dict = field(default_factory=dict, repr=False)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def z(self) -> float:
        return float(ndtri(0.5 + self.confidence_level / 2.0))

    @property
    def ci_lower(self) -> np.ndarray:
        return self.theta - self.z * self.std_errors

    @property
    def ci_upper(self) -> np.ndarray:
        return self.theta + self.z * self.std_errors

    def coef(self, name: str) -> float:
        return float(self.theta[self.names.index(name)])

    def with_long_run(self, effects) -> "EstimateResult":
        return replace(self, long_run=tuple(effects))

    def to_dict(self) -> dict:
        coefs = []
        for j, name in enumerate(self.names):
            coefs.append({
                "name": name,
                "estimate": _num(self.theta[j]),
                "std_error": _num(self.std_errors[j]),
                "ci_lower": _num(self.ci_lower[j]),
                "ci_upper": _num(self.ci_upper[j]),
            })
        return {
            "method": self.method,
            "params": self.params,
            "confidence_level": self.confidence_level,
            "coefficients": coefs,
            "covariance": [[_num(v) for v in row] for row in self.covariance],
            "long_run": [
                {"label": e.label, "estimate": _num(e.estimate), "std_error": _num(e.std_error)}
                for e in self.long_run
            ],
            "metadata": self.metadata,
        }


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------- first stage


_MODES = {("lasso", False): 0, ("lasso", True): 1, ("ols", False): 2, ("ols", True): 2}


def _fit_period(v, responses, t, columns, config: FirstStageConfig, names):
    """Fit every projected regressor of one period on the shared design ``v``."""
    n, m = v.shape
    weights = _lasso.lag_weights(columns, t, config.lag_weighting)
    lam = 0.0 if config.method == "ols" else _lasso.default_penalty(n, m, config.c, config.alpha_mass)
    thresh = 0.5 * lam * weights[1:]
    theta, sweeps, conv = _lasso._multi_fit_kernel(
        np.ascontiguousarray(v), np.ascontiguousarray(responses), thresh, float(config.tol),
        int(config.max_sweeps), _MODES[config.method, config.post_lasso])
    if not conv.all():
        r = int(np.flatnonzero(~conv)[0])
        raise FirstStageError(f"first stage at t={t} for {names[r]} did not converge", period=t, regressor=names[r])
    return PeriodFit(period=t, columns=columns, theta=theta, penalty=lam, weights=weights,
                     n_sweeps=tuple(int(k) for k in sweeps))


def fit_first_stage(panel: PanelData, fit_subset=None, config: FirstStageConfig | None = None,
                    transformed: TransformedPanel | None = None) -> FirstStageFits:
    """LASSO (or OLS) of each demeaned-differenced projected regressor on
    ``V_t``, for t = 2..T, using only the units in ``fit_subset``.

    Demeaning happens within ``fit_subset``.
    """
    config = config or FirstStageConfig()
    units = _check_units(panel, fit_subset)
    if units.size < 2:
        raise BadParameter("first stage needs at least two units")
    tp = transformed if transformed is not None else difference_and_demean(panel, units, demean=True)
    proj = panel.projected
    names = [panel.regressor_names[j] for j in proj]
    periods = []
    for t in range(2, panel.n_periods + 1):
        im = build_instrument_matrix(panel, t, units)
        if proj:
            responses = tp.diff_regressors[:, t - 2, list(proj)]
            periods.append(_fit_period(im.values, responses, t, im.columns, config, names))
        else:
            periods.append(PeriodFit(period=t, columns=im.columns, theta=np.zeros((0, im.m)), penalty=0.0,
                                     weights=_lasso.lag_weights(im.columns, t, config.lag_weighting)))
    return FirstStageFits(periods=tuple(periods), projected=proj, fit_units=units, config=config)


def predict_first_stage(fits: FirstStageFits, panel: PanelData, units=None,
                        transformed: TransformedPanel | None = None) -> np.ndarray:
    """Instruments ``W_hat`` of shape (n, T-1, d) for the given units.

    Projected columns are ``Theta_t V_it`` evaluated on the raw levels of
    ``units``; SELF columns are copied from ``transformed``.
    """
    units = _check_units(panel, units)
    tp = transformed if transformed is not None else difference_and_demean(panel, units, demean=True)
    if tp.n_units != units.size:
        raise ShapeError("transformed panel does not match the unit subset")
    w = np.array(tp.diff_regressors, copy=True)
    proj = list(fits.projected)
    if proj:
        for pf in fits.periods:
            v = build_instrument_matrix(panel, pf.period, units).values
            w[:, pf.period - 2, proj] = v @ pf.theta.T
    return w


# -------------------------------------------------------------- second stage


def _solve_qr(a, b):
    q, r, piv = scipy.linalg.qr(a, pivoting=True)
    z = scipy.linalg.solve_triangular(r, q.T @ b)
    out = np.empty_like(z)
    out[piv] = z
    return out


def _check_cond(a, what):
    if not np.all(np.isfinite(a)):
        raise SingularDesign(f"{what} has non-finite entries")
    c = np.linalg.cond(a)
    if not np.isfinite(c) or c > COND_LIMIT:
        raise SingularDesign(f"{what} is singular (condition number {c:.3g})")


def iv_second_stage(predictions, dx, dy) -> np.ndarray:
    """``theta = (sum W_hat dX')^{-1} sum W_hat dY`` over all (i, t).

    Accepts (n, T-1, d) / (n, T-1) arrays or already-flattened (n*, d) / (n*,).
    """
    w = np.asarray(predictions, float)
    x = np.asarray(dx, float)
    y = np.asarray(dy, float)
    d = x.shape[-1]
    w2 = w.reshape(-1, d)
    x2 = x.reshape(-1, d)
    y2 = y.reshape(-1)
    if w2.shape != x2.shape or y2.shape[0] != x2.shape[0]:
        raise ShapeError(f"instrument {w.shape}, regressor {x.shape}, outcome {y.shape} disagree")
    a = w2.T @ x2
    b = w2.T @ y2
    _check_cond(a, "instrument cross-moment matrix")
    return _solve_qr(a, b)


def projected_sandwich(w_hat, dx, residuals, n_periods: int | None = None):
    """Sandwich covariance built in the d-dimensional projected space.

    Returns ``(omega, covariance, clipped)``. ``covariance = A^{-1} S A^{-T}``
    with ``A = sum W_hat dX'`` and ``S`` the sum over units of the lag-0 and
    lag-1 products of ``a_it = W_hat_it * e_it``; ``omega = N T covariance``.
    If ``S`` has (numerically) negative eigenvalues they are clipped to zero
    and ``clipped`` is True.
    """
    w = np.asarray(w_hat, float)
    x = np.asarray(dx, float)
    e = np.asarray(residuals, float)
    if w.ndim != 3 or w.shape != x.shape or e.shape != w.shape[:2]:
        raise ShapeError(f"w_hat {w.shape}, dx {x.shape}, residuals {e.shape} disagree")
    n, tm1, d = w.shape
    a_mat = np.einsum("itk,itl->kl", w, x)
    _check_cond(a_mat, "Q_hat")
    a = w * e[:, :, None]
    s0 = np.einsum("itk,itl->kl", a, a)
    s1 = np.einsum("itk,itl->kl", a[:, 1:], a[:, :-1]) if tm1 > 1 else np.zeros((d, d))
    s = s0 + s1 + s1.T
    s = 0.5 * (s + s.T)
    clipped = False
    evals, evecs = np.linalg.eigh(s)
    if evals.size and evals.min() < 0.0:
        clipped = evals.min() < -1e-12 * max(1.0, abs(evals.max()))
        s = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    ainv = np.linalg.inv(a_mat)
    cov = ainv @ s @ ainv.T
    cov = 0.5 * (cov + cov.T)
    T = tm1 + 1 if n_periods is None else n_periods
    return n * T * cov, cov, clipped


def sandwich_variance(first_stage: FirstStageFits, residuals, panel: PanelData, units=None,
                      transformed: TransformedPanel | None = None) -> np.ndarray:
    """Asymptotic variance ``Omega_hat = Q^{-1} Sigma Q^{-T}``.

    ``Q_hat = (NT)^{-1} sum Theta_t V_it dX_it'`` and ``Sigma_hat`` combines
    ``Sigma_0,t`` and the lag-one ``Sigma_1,t`` terms, all evaluated through
    the projected instruments ``Theta_t V_it``. Divide by ``N T`` for the
    covariance of the estimate.
    """
    units = _check_units(panel, units)
    tp = transformed if transformed is not None else difference_and_demean(panel, units, demean=True)
    w = predict_first_stage(first_stage, panel, units, tp)
    omega, _, _ = projected_sandwich(w, tp.diff_regressors, residuals, panel.n_periods)
    return omega


# ----------------------------------------------------------------- estimators


def _support_stats(fits: FirstStageFits, names) -> dict:
    return {"first_stage": fits.support_summary(names)}


def ab_lasso(panel: PanelData, config: EstimatorConfig | None = None) -> EstimateResult:
    """AB-LASSO on the full sample (no sample splitting)."""
    config = config or EstimatorConfig()
    units = np.arange(panel.n_units)
    tp = difference_and_demean(panel, units, demean=True)
    fs = fit_first_stage(panel, units, config.first_stage, transformed=tp)
    w = predict_first_stage(fs, panel, units, tp)
    theta = iv_second_stage(w, tp.diff_regressors, tp.diff_outcome)
    resid = tp.diff_outcome - tp.diff_regressors @ theta
    _, cov, clipped = projected_sandwich(w, tp.diff_regressors, resid, panel.n_periods)
    meta = _support_stats(fs, panel.regressor_names)
    meta["psd_clipped"] = bool(clipped)
    tag = "ABLasso" if config.first_stage.method == "lasso" else "ABOLS"
    return EstimateResult(theta=theta, covariance=cov, names=panel.regressor_names, method=tag,
                          confidence_level=config.confidence_level, residuals=resid,
                          params={"first_stage": config.first_stage.__dict__.copy()}, metadata=meta)


def _fold_pass(panel, main, aux, fs_config):
    fs = fit_first_stage(panel, aux, fs_config)
    tp = difference_and_demean(panel, main, demean=True)
    w = predict_first_stage(fs, panel, main, tp)
    theta = iv_second_stage(w, tp.diff_regressors, tp.diff_outcome)
    return theta, w, tp, fs


def _aggregate(values: np.ndarray, how: str) -> np.ndarray:
    return np.median(values, axis=0) if how == "median" else values.mean(axis=0)


def ab_lasso_ss(panel: PanelData, plan: CrossFitPlan | None = None, config: EstimatorConfig | None = None,
                folds: Sequence | None = None) -> EstimateResult:
    """AB-LASSO with K-fold cross-fitting over repeated random splits.

    For each fold, the first stage is fitted on the other K-1 folds (demeaned
    among themselves) and the IV step runs on the fold (demeaned within it).
    Fold estimates are averaged within a split and aggregated across splits
    by ``plan.aggregation``.

    ``folds`` overrides the random assignment: a list of splits, each a list
    of unit-index arrays partitioning ``0..N-1``.
    """
    plan = plan or CrossFitPlan()
    config = config or EstimatorConfig()
    n = panel.n_units
    if folds is None:
        folds = plan.splits(n)
    else:
        folds = [[np.asarray(f, dtype=np.int64) for f in split] for split in folds]
        for split in folds:
            allu = np.sort(np.concatenate(split))
            if not np.array_equal(allu, np.arange(n)):
                raise BadPlan("each split must partition the units")
            if min(f.size for f in split) < 2 or len(split) < 2:
                raise BadPlan("every fold needs at least two units and a split at least two folds")
    split_thetas = []
    stacked = []
    for split in folds:
        fold_thetas = []
        parts = []
        for k, main in enumerate(split):
            aux = np.sort(np.concatenate([f for kk, f in enumerate(split) if kk != k]))
            theta_k, w, tp, _ = _fold_pass(panel, main, aux, config.first_stage)
            fold_thetas.append(theta_k)
            parts.append((w, tp.diff_regressors, tp.diff_outcome))
        split_thetas.append(np.mean(fold_thetas, axis=0))
        stacked.append(tuple(np.concatenate(p, axis=0) for p in zip(*parts)))
    split_thetas = np.array(split_thetas)
    theta = _aggregate(split_thetas, plan.aggregation)

    full = difference_and_demean(panel, None, demean=True)
    resid = full.diff_outcome - full.diff_regressors @ theta
    clipped = False
    meta = {}
    if config.variance == "full_refit":
        fs = fit_first_stage(panel, None, config.first_stage, transformed=full)
        w = predict_first_stage(fs, panel, None, full)
        _, cov, clipped = projected_sandwich(w, full.diff_regressors, resid, panel.n_periods)
        meta.update(_support_stats(fs, panel.regressor_names))
    else:
        use = stacked[-1:] if config.variance == "last_split" else stacked
        covs = []
        for w, dx, dy in use:
            _, c, cl = projected_sandwich(w, dx, dy - dx @ theta, panel.n_periods)
            covs.append(c)
            clipped = clipped or cl
        cov = np.mean(covs, axis=0)
    meta["psd_clipped"] = bool(clipped)
    meta["split_estimates"] = split_thetas.tolist()
    tag = "ABLassoSS" if config.first_stage.method == "lasso" else "ABOLSSS"
    return EstimateResult(
        theta=theta, covariance=cov, names=panel.regressor_names, method=tag,
        confidence_level=config.confidence_level, residuals=resid,
        params={"K": len(folds[0]), "n_splits": len(folds), "seed": plan.seed,
                "aggregation": plan.aggregation, "variance": config.variance,
                "first_stage": config.first_stage.__dict__.copy()},
        metadata=meta,
    )


def long_run_effects(result: EstimateResult, effect_indices, lag_coefficient_indices,
                     labels: Sequence[str] | None = None) -> list:
    """``theta_k / (1 - sum beta_j)`` with delta-method standard errors."""
    lags = [int(j) for j in lag_coefficient_indices]
    denom = 1.0 - float(np.sum(result.theta[lags])) if lags else 1.0
    if abs(denom) < 1e-8:
        raise UnitRootError(f"1 - sum of lag coefficients = {denom:.3g}")
    out = []
    for pos, k in enumerate(effect_indices):
        k = int(k)
        if k in lags:
            raise BadParameter("an effect index cannot also be a lag coefficient")
        grad = np.zeros(result.theta.shape[0])
        grad[k] = 1.0 / denom
        grad[lags] += result.theta[k] / denom**2
        est = result.theta[k] / denom
        se = float(np.sqrt(max(grad @ result.covariance @ grad, 0.0)))
        label = labels[pos] if labels is not None else result.names[k]
        out.append(LongRunEffect(label, float(est), se))
    return out
