"""Arellano-Bond estimation with LASSO first stages and cross-fitting."""

from __future__ import annotations

from .errors import *  # noqa: F401,F403
from .panel import (
    InstrumentMode,
    PanelData,
    add_outcome_lags,
    build_instrument_matrix,
    difference_and_demean,
    instrument_counts,
    load_panel,
    read_panel_csv,
)
from .lasso import default_penalty, kkt_violation, post_lasso_refit, solve_weighted_lasso
from .estimator import (
    CrossFitPlan,
    EstimateResult,
    EstimatorConfig,
    FirstStageConfig,
    ab_lasso,
    ab_lasso_ss,
    fit_first_stage,
    iv_second_stage,
    long_run_effects,
    sandwich_variance,
)
from .gmm import GmmConfig, ab_gmm_two_step, dab_ss, two_step_gmm
from .highdim import GeneralConfig, dantzig_weights, default_ell, general_estimate
from .simulate import DgpConfig, EstimatorSpec, MonteCarloSummary, monte_carlo, simulate_dgp, simulate_levels

__version__ = "0.1.0"
