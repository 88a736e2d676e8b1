import numpy as np
import pytest


def central_diff(f, theta, h=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = theta[i]
        theta[i] = e + h
        fp = f(theta)
        theta[i] = e - h
        fm = f(theta)
        theta[i] = e
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Max absolute difference relative to the largest reference entry."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
