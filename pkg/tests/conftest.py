import numpy as np
import pytest

from mopi.core import Dataset


def central_fd(fun, theta, step=1e-6):
    """Central finite-difference gradient of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step
        g[k] = (fun(theta + e) - fun(theta - e)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


class FixedMean:
    """Mean map returning a constant vector."""

    def __init__(self, mu):
        self.mu = np.atleast_1d(np.asarray(mu, dtype=float))

    def predict(self, X):
        return np.tile(self.mu, (np.atleast_2d(X).shape[0], 1))


def toy_data(rng, n=20, d_x=2, d_y=1, z=None, role="calibration"):
    X = rng.normal(size=(n, d_x))
    Y = rng.normal(size=(n, d_y))
    return Dataset(X, Y, z, role)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    """Record (and print) one acceptance line; shown again in the summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
