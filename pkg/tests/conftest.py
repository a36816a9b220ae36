import numpy as np
import pytest

from apcloud.geometry import BeamParams, Domain, sample_gaussian_beam
from apcloud.octree import (
    DistanceRefinement,
    ExpectedCounts,
    NestedRefinement,
    RefinementConfig,
    build_octree,
    select_nodes,
)

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def record(criterion, passed, detail):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def beam2():
    return BeamParams.benchmark(2)


@pytest.fixture(scope="session")
def beam3():
    return BeamParams.benchmark(3)


def _nodesets():
    out = {}
    d2, d3 = Domain.cube(2), Domain.cube(3)
    p2, p3 = BeamParams.benchmark(2), BeamParams.benchmark(3)
    base = select_nodes(ExpectedCounts(p2, d2, 1_000_000), RefinementConfig(1.2), d2)
    out["beam-2d"] = select_nodes(ExpectedCounts(p2, d2, 1_000_000), RefinementConfig(0.3), d2)
    out["nested-2d"] = select_nodes(ExpectedCounts(p2, d2, 1), None, d2,
                                    refine=NestedRefinement(base, 1))
    out["distance-2d"] = select_nodes(ExpectedCounts(p2, d2, 1), None, d2,
                                      refine=DistanceRefinement((0.3, -0.2), 6))
    parts = sample_gaussian_beam(p2, 50_000, 7, d2)
    out["sampled-2d"] = select_nodes(build_octree(parts, d2), RefinementConfig(0.5), d2)
    out["beam-3d"] = select_nodes(ExpectedCounts(p3, d3, 100_000), RefinementConfig(1.5), d3)
    out["distance-3d"] = select_nodes(ExpectedCounts(p3, d3, 1), None, d3,
                                      refine=DistanceRefinement((0.1, 0.0, -0.1), 4))
    return out


@pytest.fixture(scope="session")
def nodesets():
    """A spread of generated node sets: error-balance, nested, distance-refined, sampled."""
    return _nodesets()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
