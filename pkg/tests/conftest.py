import numpy as np
import pytest

from firespde.mcmc import make_rng
from firespde.mesh import MeshConfig, build_mesh
from firespde.synthetic import grid_locations


@pytest.fixture
def rng():
    return make_rng(20240601)


@pytest.fixture(scope="session")
def grid8():
    loc = grid_locations(8, 8, 1.0)
    return loc, build_mesh(loc, MeshConfig(node_ratio=0.5))


def ks_distance(a, b):
    """Two-sample Kolmogorov-Smirnov statistic."""
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
