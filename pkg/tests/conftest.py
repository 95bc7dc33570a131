import numpy as np
import pytest

from csidn import datagen


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_circles():
    spec = datagen.CirclesSpec(n_per_class=200, seed=3)
    return spec, datagen.gen_circles(spec)


def random_probs(g, n, k):
    z = g.normal(size=(n, k)) * 2.0
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def random_stochastic(g, k, n=None):
    shape = (k, k) if n is None else (n, k, k)
    T = g.uniform(0.05, 1.0, size=shape)
    return T / T.sum(axis=-1, keepdims=True)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
