import numpy as np
import pytest
from hypothesis import settings

from scsp.dynamics import SystemParams
from scsp.geometry import make_box

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def box():
    return make_box((0.1, 0.1, 0.1))


@pytest.fixture(scope="session")
def truth():
    """Ground-truth style parameters for a 0.1 kg cube."""
    I = 0.1 * (0.1 ** 2 + 0.1 ** 2) / 12
    return SystemParams(M_o=np.diag([0.1, 0.1, 0.1, I, I, I]), K_r=300.0 * np.eye(3), mass=0.1)


@pytest.fixture(scope="session")
def planner_prm():
    return SystemParams.paper_planner(eps=0.002)


_ACCEPT = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPT] = []


@pytest.fixture
def verdict(request):
    """verdict(n, ok, detail) records one PASS/FAIL line for the terminal summary."""
    lines = request.config.stash[_ACCEPT]

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
