import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cmdp_dual.core import Cmdp, GridworldConfig, build_gridworld

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid_cfg():
    return GridworldConfig()


@pytest.fixture(scope="session")
def gridworld(grid_cfg):
    return build_gridworld(grid_cfg)


@pytest.fixture
def two_state():
    """Two states, two actions; action 1 in state 0 moves to state 1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, :, 1] = 1.0
    R = np.array([[[0.0, 1.0], [2.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]]])
    return Cmdp(P, np.array([1.0, 0.0]), R, np.array([2.0]), 0.9)
