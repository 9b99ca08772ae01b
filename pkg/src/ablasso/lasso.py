"""Weighted-penalty LASSO for the per-period first stage.

Objective (sum of squares, not mean)::

    sum_i (y_i - v_i' pi)^2 + lam * sum_j w_j |pi_j|

The first design column is the constant; its weight is zero, so it is
profiled out by centring and the slopes are found by cyclic coordinate
descent on the centred Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numba import njit
from scipy.special import ndtri

from .errors import BadParameter, ConvergenceError, ShapeError

__all__ = [
    "LassoFit",
    "default_penalty",
    "lag_weights",
    "solve_weighted_lasso",
    "post_lasso_refit",
    "predict",
    "kkt_violation",
    "lasso_objective",
]


@dataclass(frozen=True, eq=False)
class LassoFit:
    """Result of one LASSO (or post-LASSO) fit.

    ``coefficients[0]`` is the intercept; ``support`` lists design columns
    (never 0) with a nonzero slope.
    """

    coefficients: np.ndarray
    support: tuple
    penalty: float
    weights: np.ndarray
    post_refit: bool = False
    objective_value: float = float("nan")
    n_sweeps: int = 0
    converged: bool = True
    objective_trace: np.ndarray | None = field(default=None, repr=False)


def default_penalty(n_obs: int, m_t: int, c: float = 1.0, alpha_mass: float = 0.1) -> float:
    """Design-independent penalty ``2 c sqrt(n) Phi^{-1}(1 - alpha_mass / (2 m_t))``."""
    if n_obs < 1 or m_t < 1:
        raise BadParameter(f"n_obs and m_t must be positive, got {n_obs}, {m_t}")
    if c < 0:
        raise BadParameter("c must be non-negative")
    tail = alpha_mass / (2.0 * m_t)
    if not 0.0 < tail < 1.0:
        raise BadParameter(f"alpha_mass/(2 m_t) = {tail} is outside (0, 1)")
    if c == 0:
        return 0.0
    return float(2.0 * c * np.sqrt(n_obs) * -ndtri(tail))


def lag_weights(columns, t: int, scheme: str = "uniform") -> np.ndarray:
    """Penalty weights for the columns of an :class:`InstrumentMatrix`.

    ``uniform`` gives 1 to every slope. ``distance`` gives ``(t-1)/s`` to a
    level dated ``s`` lags back-equivalent, so older lags are penalised more.
    The constant always gets 0.
    """
    w = np.ones(len(columns))
    w[0] = 0.0
    if scheme == "uniform":
        return w
    if scheme != "distance":
        raise BadParameter(f"unknown lag weighting {scheme!r}")
    for c, (source, period) in enumerate(columns[1:], start=1):
        if source == "outcome":
            s = period + 1  # Y_{t-2} plays the role of the first lag
        else:
            s = period
        w[c] = (t - 1) / max(1, min(s, t - 1))
    return w


@njit(cache=True)
def _cd_kernel(gram, xty, thresh, beta, tol, max_sweeps, yy, trace):
    m = xty.shape[0]
    grad = xty.copy()
    for j in range(m):
        bj = beta[j]
        if bj != 0.0:
            for k in range(m):
                grad[k] -= gram[j, k] * bj
    sweeps = 0
    converged = False
    for sweep in range(max_sweeps):
        max_delta = 0.0
        max_abs = 0.0
        for j in range(m):
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            bj = beta[j]
            rho = grad[j] + gjj * bj
            tj = thresh[j]
            if rho > tj:
                new = (rho - tj) / gjj
            elif rho < -tj:
                new = (rho + tj) / gjj
            else:
                new = 0.0
            delta = new - bj
            if delta != 0.0:
                for k in range(m):
                    grad[k] -= gram[j, k] * delta
                beta[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
            if abs(new) > max_abs:
                max_abs = abs(new)
        sweeps += 1
        if sweep < trace.shape[0]:
            # yy - 2 b'c + b'Gb = yy - b'(c + grad)  since grad = c - G b
            val = yy
            for j in range(m):
                val -= beta[j] * (xty[j] + grad[j])
                val += 2.0 * thresh[j] * abs(beta[j])
            trace[sweep] = val
        if max_delta <= tol * max(1.0, max_abs):
            converged = True
            break
    return sweeps, converged


@njit(cache=True)
def _multi_fit_kernel(v, responses, thresh, tol, max_sweeps, mode):
    """Fit several responses on one shared design ``v`` (constant first).

    ``mode`` 0: LASSO, 1: post-LASSO, 2: OLS on every non-constant column.
    Returns coefficient rows (intercept first), sweep counts and convergence flags.
    """
    n, m = v.shape
    r = responses.shape[1]
    p = m - 1
    xbar = np.zeros(p)
    for j in range(p):
        xbar[j] = v[:, j + 1].mean()
    xc = np.empty((n, p))
    for i in range(n):
        for j in range(p):
            xc[i, j] = v[i, j + 1] - xbar[j]
    gram = xc.T @ xc
    out = np.zeros((r, m))
    sweeps = np.zeros(r, dtype=np.int64)
    conv = np.ones(r, dtype=np.bool_)
    trace = np.empty(0)
    for k in range(r):
        ybar = responses[:, k].mean()
        yc = responses[:, k] - ybar
        xty = xc.T @ yc
        beta = np.zeros(p)
        if mode == 2:
            for j in range(p):
                if gram[j, j] > 0.0:
                    beta[j] = 1.0
        else:
            sw, ok = _cd_kernel(gram, xty, thresh, beta, tol, max_sweeps, 0.0, trace)
            sweeps[k] = sw
            conv[k] = ok
        if mode >= 1:
            cnt = 0
            for j in range(p):
                if beta[j] != 0.0:
                    cnt += 1
            idx = np.empty(cnt, dtype=np.int64)
            c = 0
            for j in range(p):
                if beta[j] != 0.0:
                    idx[c] = j
                    c += 1
            beta[:] = 0.0
            if cnt > 0:
                xs = np.empty((n, cnt))
                for c in range(cnt):
                    xs[:, c] = xc[:, idx[c]]
                sol = np.linalg.lstsq(xs, yc, rcond=1e-13 * max(n, cnt))[0]
                for c in range(cnt):
                    beta[idx[c]] = sol[c]
        out[k, 0] = ybar - xbar @ beta
        out[k, 1:] = beta
    return out, sweeps, conv


def _check_problem(design, response, weights):
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[1] < 1:
        raise ShapeError(f"design {x.shape} does not match response {y.shape}")
    if weights is None:
        w = np.ones(x.shape[1])
        w[0] = 0.0
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != x.shape[1]:
            raise ShapeError(f"{w.shape[0]} weights for {x.shape[1]} columns")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise BadParameter("weights must be finite and non-negative")
        if w[0] != 0.0:
            raise BadParameter("the intercept weight must be 0")
    if x.shape[0] and np.ptp(x[:, 0]) != 0.0:
        raise BadParameter("the first design column must be the constant")
    return x, y, w


def _centre(x, y):
    xbar = x[:, 1:].mean(axis=0)
    ybar = y.mean()
    xc = x[:, 1:] - xbar
    yc = y - ybar
    return xc, yc, xbar, ybar


def _polish(gram, xty, thresh, beta, active=None, signs=None):
    """Re-solve the stationarity equations on an active set with fixed signs.

    Returns ``beta`` itself unless the candidate passes the full KKT check.
    """
    if active is None:
        active = np.flatnonzero(beta)
        signs = np.sign(beta[active])
    if active.size == 0:
        return beta
    ga = gram[np.ix_(active, active)]
    ev = np.linalg.eigvalsh(ga)
    if ev[0] <= 1e-10 * ev[-1]:
        return beta
    b = scipy.linalg.solve(ga, xty[active] - thresh[active] * signs, assume_a="pos", check_finite=False)
    if not np.all(np.isfinite(b)) or np.any(np.sign(b) != signs):
        return beta
    new = np.zeros_like(beta)
    new[active] = b
    grad = xty - gram @ new
    inactive = np.ones(beta.shape[0], dtype=bool)
    inactive[active] = False
    slack = 1e-12 * max(1.0, float(np.max(np.abs(xty))) if xty.size else 1.0)
    if np.any(np.abs(grad[inactive]) > thresh[inactive] * (1 + 1e-10) + slack):
        return beta
    return new


def _drop_null_directions(gram, thresh, beta):
    """Shrink a rank-deficient active set without raising the objective.

    Moving along a null vector ``z`` of the active Gram block leaves the fit
    unchanged, and the penalty is linear in the step while signs are fixed;
    step in its non-increasing direction until a coefficient reaches zero.
    """
    b = beta.copy()
    for _ in range(b.size):
        act = np.flatnonzero(b)
        if act.size == 0:
            break
        ev, vec = np.linalg.eigh(gram[np.ix_(act, act)])
        if ev[0] > 1e-10 * ev[-1]:
            break
        z = vec[:, 0]
        if thresh[act] @ (np.sign(b[act]) * z) > 0:
            z = -z
        shrinking = b[act] * z < 0
        if not shrinking.any():
            return beta
        ratios = np.full(act.size, np.inf)
        ratios[shrinking] = -b[act][shrinking] / z[shrinking]
        k = int(np.argmin(ratios))
        b[act] += ratios[k] * z
        b[act[k]] = 0.0
    return beta if np.array_equal(b, beta) else b


def _jump_to_solution(gram, xty, thresh, beta):
    """Guess the optimal active set from a CD iterate and certify it.

    Tries the current nonzeros, then the near-equicorrelation sets
    ``|grad_j| >= (1 - delta) thresh_j``, which also drop slowly vanishing
    coordinates.
    """
    cand = _polish(gram, xty, thresh, beta)
    if cand is not beta:
        return cand
    basic = _drop_null_directions(gram, thresh, beta)
    if basic is not beta:
        cand = _polish(gram, xty, thresh, basic)
        if cand is not basic:
            return cand
    grad = xty - gram @ beta
    for delta in (1e-2, 1e-4, 1e-6):
        act = np.flatnonzero((np.abs(grad) >= (1 - delta) * thresh) & (thresh > 0))
        cand = _polish(gram, xty, thresh, beta, act, np.sign(grad[act]))
        if cand is not beta:
            return cand
    return beta


def _solve_centred(gram, xty, thresh, tol, max_sweeps, yy=0.0, beta0=None, trace_len=0):
    m = xty.shape[0]
    beta = np.zeros(m) if beta0 is None else np.array(beta0, dtype=float)
    trace = np.empty(trace_len)
    done, chunk, converged = 0, 200, False
    while done < max_sweeps:
        k, view = min(chunk, max_sweeps - done), trace[min(done, trace_len):]
        sweeps, converged = _cd_kernel(gram, xty, thresh, beta, float(tol), int(k), float(yy), view)
        done += sweeps
        if converged:
            break
        # slow tail: try the exact solution on the current active set
        cand = _jump_to_solution(gram, xty, thresh, beta)
        if cand is not beta:
            beta, converged = cand, True
            break
        chunk *= 2
    if converged:
        beta = _polish(gram, xty, thresh, beta)
    return beta, done, converged, trace[: min(trace_len, done)]


def lasso_objective(design, response, coefficients, penalty, weights) -> float:
    r = np.asarray(response, float) - np.asarray(design, float) @ coefficients
    return float(r @ r + penalty * np.sum(np.asarray(weights) * np.abs(coefficients)))


def solve_weighted_lasso(
    design,
    response,
    penalty: float,
    weights=None,
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
    warm_start=None,
    record_trace: bool = False,
) -> LassoFit:
    """Minimise ``||y - V pi||^2 + penalty * sum_j weights_j |pi_j|``.

    Cyclic coordinate descent with exact soft-threshold updates, stopped when
    the largest coefficient change in a sweep drops below ``tol`` (relative to
    ``max(1, max|pi|)``). Raises :class:`ConvergenceError` at ``max_sweeps``.
    """
    x, y, w = _check_problem(design, response, weights)
    if penalty < 0 or not np.isfinite(penalty):
        raise BadParameter("penalty must be finite and non-negative")
    xc, yc, xbar, ybar = _centre(x, y)
    gram = xc.T @ xc
    xty = xc.T @ yc
    thresh = 0.5 * penalty * w[1:]
    beta0 = None if warm_start is None else np.asarray(warm_start, float)[1:]
    beta, sweeps, converged, trace = _solve_centred(
        gram, xty, thresh, tol, max_sweeps, yy=float(yc @ yc), beta0=beta0,
        trace_len=max_sweeps if record_trace else 0,
    )
    coef = np.concatenate([[ybar - xbar @ beta], beta])
    if not converged:
        raise ConvergenceError(f"no convergence after {max_sweeps} sweeps", last_iterate=coef)
    return LassoFit(
        coefficients=coef,
        support=tuple(int(j) + 1 for j in np.flatnonzero(beta)),
        penalty=float(penalty),
        weights=w,
        post_refit=False,
        objective_value=lasso_objective(x, y, coef, penalty, w),
        n_sweeps=int(sweeps),
        converged=True,
        objective_trace=trace if record_trace else None,
    )


def post_lasso_refit(design, response, support, penalty: float = 0.0, weights=None) -> LassoFit:
    """OLS of ``response`` on the constant plus the ``support`` columns.

    Rank-deficient restricted designs get the minimum-norm least-squares
    solution. Coefficients off the support are exactly zero.
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).reshape(-1)
    if x.ndim != 2 or x.size == 0 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"design {x.shape} does not match response {y.shape}")
    support = tuple(sorted(int(j) for j in support))
    if any(j < 1 or j >= x.shape[1] for j in support):
        raise ShapeError(f"support {support} is not a subset of the slope columns")
    cols = [0, *support]
    sol, *_ = np.linalg.lstsq(x[:, cols], y, rcond=None)
    coef = np.zeros(x.shape[1])
    coef[cols] = sol
    w = np.ones(x.shape[1]) if weights is None else np.asarray(weights, float)
    if weights is None:
        w[0] = 0.0
    return LassoFit(
        coefficients=coef,
        support=tuple(j for j in support if coef[j] != 0.0),
        penalty=float(penalty),
        weights=w,
        post_refit=True,
        objective_value=lasso_objective(x, y, coef, penalty, w),
    )


def predict(fit: LassoFit, design) -> np.ndarray:
    x = np.asarray(design, dtype=float)
    if x.ndim != 2 or x.shape[1] != fit.coefficients.shape[0]:
        raise ShapeError(f"design {x.shape} does not match {fit.coefficients.shape[0]} coefficients")
    return x @ fit.coefficients


def kkt_violation(fit: LassoFit, design, response) -> float:
    """Largest KKT violation in mean-gradient units.

    With ``g_j = V_j'(y - V pi) / N`` and ``h_j = penalty * w_j / (2N)``:
    active slopes need ``g_j = h_j sign(pi_j)``, inactive ones ``|g_j| <= h_j``,
    and the intercept needs ``g_0 = 0``.
    """
    x = np.asarray(design, float)
    y = np.asarray(response, float)
    n = x.shape[0]
    g = x.T @ (y - x @ fit.coefficients) / n
    h = fit.penalty * fit.weights / (2.0 * n)
    coef = fit.coefficients
    viol = np.where(
        coef != 0.0,
        np.abs(g - h * np.sign(coef)),
        np.maximum(np.abs(g) - h, 0.0),
    )
    viol[0] = abs(g[0])
    return float(viol.max())
