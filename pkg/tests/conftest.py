"""Shared fixtures: the reference configuration and cached expensive runs."""
from __future__ import annotations

import math

import numpy as np
import pytest

from cfselfsim.coefficients import CoefficientSet, DaughterSpec, DiagnosticParams, mollify
from cfselfsim.dynamics import EvolveConfig, evolve
from cfselfsim.grid import make_grid, project
from cfselfsim.profile import ProfileConfig, solve_profile

RHO_SMALL = 0.5 / (4.0 * math.log(2.0))
EPS = 1e-2

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ex1():
    return CoefficientSet(lam=2.0, alpha=1.0, K0=1.0, a0=1.0)


@pytest.fixture(scope="session")
def power0():
    return DaughterSpec(nu=0.0)


@pytest.fixture(scope="session")
def mollified0(power0):
    return mollify(power0, EPS)


@pytest.fixture(scope="session")
def profiles(ex1, power0):
    """Profile certificates at 256 and 512 cells, computed on first use."""
    cache = {}

    def get(n):
        if n not in cache:
            cache[n] = solve_profile(ex1, power0, EPS, RHO_SMALL, ProfileConfig(n_cells=n))
        return cache[n]

    return get


@pytest.fixture(scope="session")
def rescaled_runs(ex1, mollified0, power0):
    """Rescaled trajectories on s in [0, 20] with fine snapshots, no early stop."""
    cache = {}

    def get(n):
        if n not in cache:
            grid = make_grid(1e-6, 1e3, n)
            f0 = project(lambda x: RHO_SMALL * np.exp(-x), grid)
            cfg = EvolveConfig(mode="rescaled", t_end=20.0, snapshot_every=0.05, steady_tol=0.0,
                               dt_max=0.05, record_steps=False)
            cache[n] = evolve(f0, cfg, ex1, mollified0, DiagnosticParams.default(ex1, power0))[0]
        return cache[n]

    return get
