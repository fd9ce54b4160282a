import numpy as np
import pytest

from protoquad.embedding import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def logistic_data(rng, n, d, scale=1.5, bias=0.2):
    X = rng.standard_normal((n, d))
    theta = rng.standard_normal(d)
    theta *= scale / np.linalg.norm(theta)
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ theta + bias)))).astype(int)
    return Dataset(X, y)


def random_spd(rng, p, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    ev = np.geomspace(1.0, cond, p)
    return (Q * ev) @ Q.T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
