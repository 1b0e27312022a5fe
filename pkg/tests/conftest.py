import numpy as np
import pytest

from chronosync.clock import ClockParams, GnssClockParams, stacked_noise_cov
from chronosync.gains import design_gains
from chronosync.network import example_topology
from chronosync.sim import Scenario

# Three cesium clocks (white / random-walk frequency noise variances).
MACS = (
    ClockParams(0.0289e-18, 0.0227e-24),
    ClockParams(7.84996e-3 * 1e-18, 2.83e-3 * 1e-24),
    ClockParams(0.0149e-18, 2.7889e-4 * 1e-24),
)
# Edge measurement noise in canonical slot order (1<-2, 1->2, 2<-3, 2->3).
R_EDGE = np.array([0.1895, 0.0058, 0.2228, 0.0136]) * 1e-28
R_GNSS = np.array([0.1721, 0.0078]) * 1e-16
GAC = ClockParams(2e-21, 1e-29)


def reference_scenario(**kw) -> Scenario:
    kw.setdefault("s", 1000)
    kw.setdefault("horizon", 1000)
    gnss = [GnssClockParams(GAC, 1e-9 * (j + 1)) for j in range(2)]
    return Scenario(example_topology(), MACS, gnss, R_EDGE, R_GNSS, **kw)


def reference_noise():
    """``(Q, Q_G, R, R_G)`` of the three-clock example."""
    return (stacked_noise_cov(MACS, 1.0), stacked_noise_cov([GAC, GAC], 1.0),
            np.diag(R_EDGE), np.diag(R_GNSS))


@pytest.fixture(scope="session")
def topo():
    return example_topology()


@pytest.fixture(scope="session")
def desk():
    """Desk-scale scenario (broadcast every 100 steps) and its gains."""
    sc = reference_scenario(s=100, horizon=10_000)
    return sc, design_gains(sc)


@pytest.fixture(scope="session")
def full():
    """Full-scale scenario (broadcast every 1000 steps) and its gains."""
    sc = reference_scenario(s=1000, horizon=1000)
    return sc, design_gains(sc)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE = []


def report_criterion(number, title, ok, detail):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
