"""Dantzig-selector weighting and the estimator for a low-dimensional block
``X1`` in the presence of many self-instrumenting controls ``X2``.

For each period the instrument vector ``U_it = (W_hat_1it; dX2_it)`` is
combined into ``d1`` instruments ``W_t' U_it``, where ``W_t`` (d x d1) is the
l1-smallest matrix with ``|M_t W_t - I_{d x d1}|_max <= ell_t`` and
``M_t = N^-1 sum_i dX_it U_it'``. The constraint keeps the combined
instruments nearly orthogonal to ``dX2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from . import lasso as _lasso
from .errors import BadParameter, Infeasible, InternalError
from .estimator import (
    CrossFitPlan,
    EstimateResult,
    FirstStageConfig,
    _aggregate,
    fit_first_stage,
    iv_second_stage,
    predict_first_stage,
    projected_sandwich,
)
from .panel import InstrumentMode, PanelData, _check_units, difference_and_demean

__all__ = ["DantzigWeights", "GeneralConfig", "dantzig_weights", "default_ell", "general_estimate"]


@dataclass(frozen=True, eq=False)
class DantzigWeights:
    matrix: np.ndarray
    slack: float
    l1_norm: float
    ell: float


def default_ell(d: int, n: int, c_ell: float = 0.5) -> float:
    """``c_ell * sqrt(log(max(d, n)) / n)``."""
    return float(c_ell * np.sqrt(np.log(max(d, n)) / n))


def _polish_column(m, e, ell, w):
    """Re-solve the LP vertex exactly from its active rows and support."""
    d = m.shape[0]
    scale = max(1.0, float(np.abs(m).max()))
    tol = 1e-7 * scale * max(1.0, float(np.abs(w).max()))
    support = np.flatnonzero(np.abs(w) > tol)
    if support.size == 0:
        return w
    r = m @ w - e
    rows = np.flatnonzero(np.abs(np.abs(r) - ell) <= tol)
    if rows.size < support.size:
        return w
    sign = np.sign(r[rows])
    sign[sign == 0] = 1.0
    a = m[np.ix_(rows, support)]
    if np.linalg.matrix_rank(a) < support.size:
        return w
    sol, *_ = np.linalg.lstsq(a, e[rows] + sign * ell, rcond=None)
    cand = np.zeros(d)
    cand[support] = sol
    if np.abs(m @ cand - e).max() > ell + 1e-12 * scale * max(1.0, np.abs(cand).max()):
        return w
    if np.abs(cand).sum() > np.abs(w).sum() * (1 + 1e-9) + 1e-14:
        return w
    return cand


def dantzig_weights(m_hat, ell: float, d1: int | None = None) -> DantzigWeights:
    """Column-wise ``min |w|_1`` subject to ``|m_hat w - e_j|_inf <= ell``.

    Each column is a linear program in ``(w+, w-) >= 0`` solved with HiGHS,
    then polished to the exact vertex.
    """
    m = np.asarray(m_hat, float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise BadParameter(f"m_hat must be square, got {m.shape}")
    d = m.shape[0]
    d1 = d if d1 is None else int(d1)
    if not 1 <= d1 <= d:
        raise BadParameter(f"d1={d1} must lie in 1..{d}")
    if ell < 0 or not np.isfinite(ell):
        raise BadParameter("ell must be finite and non-negative")
    a_ub = np.block([[m, -m], [-m, m]])
    c = np.ones(2 * d)
    out = np.zeros((d, d1))
    for j in range(d1):
        e = np.zeros(d)
        e[j] = 1.0
        b_ub = np.concatenate([e + ell, ell - e])
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=(0, None), method="highs",
                      options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
        if res.status == 2:
            raise Infeasible(f"Dantzig column {j} is infeasible at ell={ell}", column=j)
        if res.status == 3:
            raise InternalError(f"Dantzig column {j} reported unbounded")
        if res.status != 0:
            raise InternalError(f"Dantzig column {j}: {res.message}")
        w = res.x[:d] - res.x[d:]
        out[:, j] = _polish_column(m, e, ell, w)
    eye = np.eye(d)[:, :d1]
    slack = float(np.abs(m @ out - eye).max())
    if slack > ell + 1e-8 * max(1.0, np.abs(m).max()):
        raise Infeasible(f"Dantzig solution misses the constraint by {slack - ell:.3g}", column=-1)
    return DantzigWeights(matrix=out, slack=slack, l1_norm=float(np.abs(out).sum()), ell=float(ell))


@dataclass(frozen=True)
class GeneralConfig:
    """``ell=None`` uses :func:`default_ell` per period with ``c_ell``.

    ``control_penalty_c`` scales the pooled LASSO that estimates the control
    coefficients for residuals.
    """

    first_stage: FirstStageConfig = field(default_factory=FirstStageConfig)
    ell: float | None = None
    c_ell: float = 0.5
    confidence_level: float = 0.95
    control_penalty_c: float = 1.0


def _split_columns(panel: PanelData, low_dim: Sequence[str]):
    low = [panel.index_of(n) for n in low_dim]
    if not low:
        raise BadParameter("at least one low-dimensional regressor is needed")
    high = [j for j in range(panel.n_regressors) if j not in low]
    bad = [panel.regressor_names[j] for j in high if panel.instrument_modes[j] is not InstrumentMode.SELF]
    if bad:
        raise BadParameter(f"high-dimensional controls must be self-instrumenting: {bad}")
    return low, high


def _combined_instruments(panel, fs, units, low, high, config):
    """``W_t' U_it`` for every unit and period, plus the Dantzig fits."""
    tp = difference_and_demean(panel, units)
    w_all = predict_first_stage(fs, panel, units, tp)
    order = low + high
    u = w_all[:, :, order]
    dx = tp.diff_regressors[:, :, order]
    n, P, d = u.shape
    d1 = len(low)
    z = np.empty((n, P, d1))
    weights = []
    for c in range(P):
        if not high:
            wt = DantzigWeights(matrix=np.eye(d1), slack=0.0, l1_norm=float(d1), ell=0.0)
        else:
            m_hat = dx[:, c].T @ u[:, c] / n
            ell = config.ell if config.ell is not None else default_ell(d, n, config.c_ell)
            try:
                wt = dantzig_weights(m_hat, ell, d1)
            except Infeasible as exc:
                raise Infeasible(f"period t={c + 2}: {exc}", column=exc.column) from exc
        weights.append(wt)
        z[:, c] = u[:, c] @ wt.matrix
    return z, tp, weights


def _control_coefficients(panel, tp, low, high, theta1, config):
    if not high:
        return np.zeros(0)
    r = (tp.diff_outcome - tp.diff_regressors[:, :, low] @ theta1).reshape(-1)
    x2 = tp.diff_regressors[:, :, high].reshape(-1, len(high))
    design = np.column_stack([np.ones(r.size), x2])
    lam = _lasso.default_penalty(r.size, design.shape[1], config.control_penalty_c)
    fit = _lasso.solve_weighted_lasso(design, r, lam)
    refit = _lasso.post_lasso_refit(design, r, fit.support)
    return refit.coefficients[1:]


def general_estimate(panel: PanelData, low_dim: Sequence[str], config: GeneralConfig | None = None,
                     plan: CrossFitPlan | None = None) -> EstimateResult:
    """Estimate the coefficients of ``low_dim`` regressors; every other
    regressor is a self-instrumenting control.

    With no controls the weighting is the identity and the result equals
    :func:`ab_lasso` on the same panel. ``plan`` switches on cross-fitting of
    the first stage, as in :func:`ab_lasso_ss`.
    """
    config = config or GeneralConfig()
    low, high = _split_columns(panel, low_dim)
    n = panel.n_units
    full = difference_and_demean(panel)
    names = tuple(panel.regressor_names[j] for j in low)
    meta: dict = {"controls": [panel.regressor_names[j] for j in high]}

    if plan is None:
        units = np.arange(n)
        fs = fit_first_stage(panel, units, config.first_stage, transformed=full)
        z, tp, weights = _combined_instruments(panel, fs, units, low, high, config)
        theta1 = iv_second_stage(z, tp.diff_regressors[:, :, low], tp.diff_outcome)
        stacked = [(z, tp)]
        meta["dantzig"] = [{"t": c + 2, "slack": w.slack, "l1_norm": w.l1_norm, "ell": w.ell}
                           for c, w in enumerate(weights)]
    else:
        thetas, stacked = [], []
        for split in plan.splits(n):
            parts, fold_thetas = [], []
            for k, main in enumerate(split):
                aux = np.sort(np.concatenate([f for kk, f in enumerate(split) if kk != k]))
                fs = fit_first_stage(panel, aux, config.first_stage)
                z, tp, _ = _combined_instruments(panel, fs, main, low, high, config)
                fold_thetas.append(iv_second_stage(z, tp.diff_regressors[:, :, low], tp.diff_outcome))
                parts.append((z, tp))
            thetas.append(np.mean(fold_thetas, axis=0))
            stacked.append(parts)
        theta1 = _aggregate(np.array(thetas), plan.aggregation)
        meta["split_estimates"] = np.array(thetas).tolist()

    theta2 = _control_coefficients(panel, full, low, high, theta1, config)
    meta["control_coefficients"] = theta2.tolist()

    def resid(tp):
        e = tp.diff_outcome - tp.diff_regressors[:, :, low] @ theta1
        if high:
            e = e - tp.diff_regressors[:, :, high] @ theta2
        return e

    covs, clipped = [], False
    if plan is None:
        z, tp = stacked[0]
        _, cov, clipped = projected_sandwich(z, tp.diff_regressors[:, :, low], resid(tp), panel.n_periods)
    else:
        for parts in stacked:
            z = np.concatenate([p[0] for p in parts])
            dx1 = np.concatenate([p[1].diff_regressors[:, :, low] for p in parts])
            e = np.concatenate([resid(p[1]) for p in parts])
            _, c, cl = projected_sandwich(z, dx1, e, panel.n_periods)
            covs.append(c)
            clipped = clipped or cl
        cov = np.mean(covs, axis=0)
    meta["psd_clipped"] = bool(clipped)
    params = {"low_dim": list(names), "ell": config.ell, "c_ell": config.c_ell,
              "first_stage": config.first_stage.__dict__.copy()}
    if plan is not None:
        params.update(K=plan.K, n_splits=plan.n_splits, seed=plan.seed, aggregation=plan.aggregation)
    return EstimateResult(theta=theta1, covariance=cov, names=names, method="GeneralHighDim",
                          confidence_level=config.confidence_level, residuals=resid(full),
                          params=params, metadata=meta)
