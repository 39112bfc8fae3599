import os
from pathlib import Path

import numpy as np
import pytest

from reachguard.config import load_config
from reachguard.grid import Grid
from reachguard.reach_sets import compute_pairwise_tables

ACCEPTANCE_LINES = []


def relative_grid(n=41, nt=25, extent=15.0):
    return Grid((-extent, -extent, -np.pi), (extent, extent, np.pi), (n, n, nt), (False, False, True))


@pytest.fixture(scope="session")
def small_tables():
    """Pairwise tables on a coarse relative grid, for unit tests."""
    return compute_pairwise_tables(relative_grid())


@pytest.fixture(scope="session")
def table_cache(request) -> Path:
    env = os.environ.get("REACHGUARD_CACHE")
    if env:
        return Path(env)
    return Path(request.config.cache.mkdir("reachguard-tables"))


@pytest.fixture(scope="session")
def default_ctx(table_cache):
    """Acceptance context on the default grids (tables cached across sessions)."""
    from reachguard.acceptance import Context

    return Context.load(load_config(cache=str(table_cache)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
