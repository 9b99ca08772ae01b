from __future__ import annotations

import numpy as np
import pytest

from ablasso import DgpConfig, PanelData, simulate_dgp


def noiseless_panel(N=40, T=8, seed=0, **kw):
    """Simulation design with the structural error switched off."""
    return simulate_dgp(DgpConfig(sigma_eps=0.0, seed=seed, **kw), N, T)


def control_design(N, T, sigma, seed, theta2=(0.5, 0.0, 0.0)):
    """One predetermined treatment ``d`` plus three exogenous controls."""
    rng = np.random.default_rng(seed)
    eps = sigma * rng.standard_normal((N, T + 1))
    c = rng.standard_normal((N, T, 3))
    d = np.zeros((N, T))
    prev = 0.0
    for t in range(T):
        prev = 0.5 * prev + 0.5 * eps[:, t] + rng.standard_normal(N)
        d[:, t] = prev
    alpha = rng.standard_normal(N)[:, None]
    gamma = rng.standard_normal(T)[None]
    y = alpha + gamma + d + c @ np.asarray(theta2) + eps[:, 1:]
    return PanelData(y, np.concatenate([d[:, :, None], c], 2), ("d", "c1", "c2", "c3"),
                     instrument_modes=("project", "self", "self", "self"))


@pytest.fixture(scope="session")
def dgp_panel():
    return simulate_dgp(DgpConfig(seed=11), 200, 12)


@pytest.fixture(scope="session")
def small_panel():
    return simulate_dgp(DgpConfig(seed=5), 60, 8)


def pytest_terminal_summary(terminalreporter):
    import sys

    test_acceptance = sys.modules.get("test_acceptance")
    if test_acceptance is not None and test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[cid])
