"""Two-step Arellano-Bond GMM and its split-panel jackknife (DAB-SS).

Moments are ``E(Z_it * dEps_it) = 0`` for t = 2..T, with ``Z_it`` the
instrument levels of :func:`build_instrument_matrix` minus the constant
(demeaning already removes it). Self-instrumenting regressors also
contribute their own transformed value as a period-``t`` instrument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import BadParameter, SingularDesign
from .estimator import EstimateResult, _check_cond
from .panel import InstrumentMode, PanelData, _check_units, build_instrument_matrix, difference_and_demean

__all__ = ["GmmConfig", "GmmFit", "gmm_blocks", "two_step_gmm", "ab_gmm_two_step", "dab_ss"]


@dataclass(frozen=True)
class GmmConfig:
    """``weight`` selects how the (typically rank-deficient) step-2 moment
    covariance is inverted: ``"pinv"`` uses the Moore-Penrose inverse,
    ``"ridge"`` adds ``1e-10 * trace / m`` to the diagonal first.
    ``centre`` subtracts the cross-unit mean of the step-1 moment
    contributions before forming that covariance."""

    max_moments: int = 10_000
    weight: str = "pinv"
    centre: bool = True
    confidence_level: float = 0.95

    def __post_init__(self):
        if self.weight not in ("pinv", "ridge"):
            raise BadParameter(f"unknown weighting {self.weight!r}")
        if self.max_moments < 1:
            raise BadParameter("max_moments must be positive")


@dataclass(frozen=True, eq=False)
class GmmFit:
    theta: np.ndarray
    covariance: np.ndarray
    theta_step1: np.ndarray
    residuals: np.ndarray
    n_moments: int
    objective: float
    flags: dict


def gmm_blocks(panel: PanelData, units=None) -> list:
    """Per-period instrument blocks ``Z_t`` (n x q_t) over ``units``."""
    units = _check_units(panel, units)
    tp = difference_and_demean(panel, units)
    self_cols = [j for j, m in enumerate(panel.instrument_modes) if m is InstrumentMode.SELF]
    blocks = []
    for t in range(2, panel.n_periods + 1):
        z = build_instrument_matrix(panel, t, units).values[:, 1:]
        if self_cols:
            z = np.hstack([z, tp.diff_regressors[:, t - 2, self_cols]])
        blocks.append(np.ascontiguousarray(z))
    return blocks


def _step1_matrix(blocks) -> np.ndarray:
    """``sum_i Z_i' H Z_i`` with H tridiagonal (2 on the diagonal, -1 off it)."""
    sizes = [b.shape[1] for b in blocks]
    off = np.concatenate([[0], np.cumsum(sizes)])
    a = np.zeros((off[-1], off[-1]))
    for t, b in enumerate(blocks):
        sl = slice(off[t], off[t + 1])
        a[sl, sl] = 2.0 * (b.T @ b)
        if t + 1 < len(blocks):
            nx = slice(off[t + 1], off[t + 2])
            c = -(b.T @ blocks[t + 1])
            a[sl, nx] = c
            a[nx, sl] = c.T
    return a


def _moment_matrix(blocks, e) -> np.ndarray:
    """Unit-level moment contributions ``g_i`` stacked into an (n x m) matrix."""
    return np.hstack([b * e[:, t:t + 1] for t, b in enumerate(blocks)])


def _stack(blocks, dx, dy):
    szx = np.vstack([b.T @ dx[:, t] for t, b in enumerate(blocks)])
    szy = np.concatenate([b.T @ dy[:, t] for t, b in enumerate(blocks)])
    return szx, szy


def _solve_sym(a, b):
    _check_cond(a, "GMM normal matrix")
    return scipy.linalg.solve(a, b, assume_a="sym")


def two_step_gmm(blocks, dx, dy, config: GmmConfig | None = None) -> GmmFit:
    """Two-step linear GMM for ``dy_it = dx_it' theta + e_it`` with
    period-specific instrument blocks.

    The returned covariance is the unit-clustered sandwich evaluated at the
    step-2 residuals.
    """
    config = config or GmmConfig()
    dx = np.asarray(dx, float)
    dy = np.asarray(dy, float)
    n, P, d = dx.shape
    if len(blocks) != P or dy.shape != (n, P):
        raise BadParameter("instrument blocks, regressors and outcome disagree")
    m = sum(b.shape[1] for b in blocks)
    if m > config.max_moments:
        raise BadParameter(f"{m} moment conditions exceed the cap of {config.max_moments}")
    if m < d:
        raise SingularDesign(f"{m} moments cannot identify {d} parameters")
    flags = {"n_moments": m, "step1_pinv": False, "step2_weight": config.weight, "step2_rank": None,
             "step2_degenerate": False}
    szx, szy = _stack(blocks, dx, dy)

    a1 = _step1_matrix(blocks)
    try:
        cf = scipy.linalg.cho_factor(a1, check_finite=False)
        dd = np.diag(cf[0]) ** 2
        if dd.min() <= 1e-13 * dd.max():
            raise np.linalg.LinAlgError
        wx = scipy.linalg.cho_solve(cf, szx, check_finite=False)
        wy = scipy.linalg.cho_solve(cf, szy, check_finite=False)
    except np.linalg.LinAlgError:
        flags["step1_pinv"] = True
        a1p = np.linalg.pinv(a1, hermitian=True)
        wx, wy = a1p @ szx, a1p @ szy
    theta1 = _solve_sym(szx.T @ wx, szx.T @ wy)
    e1 = dy - dx @ theta1

    g1 = _moment_matrix(blocks, e1)
    if config.centre:
        g1 = g1 - g1.mean(axis=0)
    scale = max(1.0, float(np.abs(dy).max()) if dy.size else 1.0)
    if not np.any(np.abs(g1) > 1e-12 * scale):
        # exact fit: the step-2 weight does not exist, keep step 1
        flags["step2_degenerate"] = True
        return GmmFit(theta=theta1, covariance=np.zeros((d, d)), theta_step1=theta1, residuals=e1,
                      n_moments=m, objective=0.0, flags=flags)
    _, s, vt = np.linalg.svd(g1, full_matrices=False)
    keep = s > s[0] * max(g1.shape) * np.finfo(float).eps
    s, vt = s[keep], vt[keep]
    flags["step2_rank"] = int(s.size)
    px, py = vt @ szx, vt @ szy
    if config.weight == "pinv":
        def quad(u_proj, u_full, w_proj, w_full):
            return (u_proj / s[:, None] ** 2).T @ w_proj
    else:
        delta = 1e-10 * float(np.sum(s**2)) / m

        def quad(u_proj, u_full, w_proj, w_full):
            inner = (u_proj / (s[:, None] ** 2 + delta)).T @ w_proj
            return inner + (u_full.T @ w_full - u_proj.T @ w_proj) / delta

    bread = quad(px, szx, px, szx)
    theta2 = _solve_sym(bread, quad(px, szx, py[:, None], szy[:, None]).ravel())
    e2 = dy - dx @ theta2
    g2 = _moment_matrix(blocks, e2)
    # szx' W2 g_i for every unit
    q = quad(px, szx, vt @ g2.T, g2.T)  # d x n
    meat = q @ q.T
    binv = np.linalg.inv(bread)
    cov = binv @ meat @ binv.T
    cov = 0.5 * (cov + cov.T)
    gbar = g2.sum(axis=0)
    obj = float(quad((vt @ gbar)[:, None], gbar[:, None], (vt @ gbar)[:, None], gbar[:, None])[0, 0])
    return GmmFit(theta=theta2, covariance=cov, theta_step1=theta1, residuals=e2, n_moments=m,
                  objective=obj, flags=flags)


def ab_gmm_two_step(panel: PanelData, config: GmmConfig | None = None, units=None) -> EstimateResult:
    """Two-step Arellano-Bond GMM on ``units`` (default: all), with time
    effects removed by demeaning within ``units``."""
    config = config or GmmConfig()
    units = _check_units(panel, units)
    tp = difference_and_demean(panel, units)
    blocks = gmm_blocks(panel, units)
    fit = two_step_gmm(blocks, tp.diff_regressors, tp.diff_outcome, config)
    return EstimateResult(
        theta=fit.theta, covariance=fit.covariance, names=panel.regressor_names, method="ABGMM",
        confidence_level=config.confidence_level, residuals=fit.residuals,
        params={"weight": config.weight, "centre": config.centre, "max_moments": config.max_moments},
        metadata={**fit.flags, "theta_step1": fit.theta_step1.tolist(), "objective": fit.objective},
    )


def dab_ss(panel: PanelData, seed: int = 0, config: GmmConfig | None = None, halves=None) -> EstimateResult:
    """Split-panel jackknife of two-step AB over one random half split.

    ``2 theta_full - (theta_A + theta_B) / 2``; each half is demeaned within
    itself. Standard errors are those of the full-sample fit.
    """
    n = panel.n_units
    if n < 4:
        raise BadParameter("DAB-SS needs at least four units")
    if halves is None:
        perm = np.random.default_rng(seed).permutation(n)
        halves = [np.sort(h) for h in np.array_split(perm, 2)]
    full = ab_gmm_two_step(panel, config)
    ta = ab_gmm_two_step(panel, config, units=halves[0]).theta
    tb = ab_gmm_two_step(panel, config, units=halves[1]).theta
    theta = 2.0 * full.theta - 0.5 * (ta + tb)
    return EstimateResult(
        theta=theta, covariance=full.covariance, names=panel.regressor_names, method="DABSS",
        confidence_level=full.confidence_level,
        residuals=full.residuals + np.einsum("itk,k->it", difference_and_demean(panel).diff_regressors,
                                             full.theta - theta),
        params={**full.params, "seed": seed},
        metadata={"theta_full": full.theta.tolist(), "theta_halves": [ta.tolist(), tb.tolist()],
                  **{k: v for k, v in full.metadata.items() if k.startswith("step")}},
    )
