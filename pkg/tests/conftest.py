import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from natmed.data import Dataset

settings.register_profile("natmed", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("natmed")


@st.composite
def datasets(draw, min_n=4, max_n=40, p=2):
    """Small valid two-phase datasets with binary covariates."""
    n = draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    w = rng.binomial(1, 0.5, (n, p)).astype(float)
    a = rng.binomial(1, 0.5, n)
    c = rng.binomial(1, 0.8, n)
    cy = c * rng.binomial(1, 0.3, n)
    r = np.where(cy == 1, 1, rng.binomial(1, 0.5, n))
    s = np.where(r == 1, rng.integers(0, 3, n).astype(float), np.nan)
    return Dataset(w, a, r, s, c, cy)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def full_sampling_dgp1(n, seed):
    """DGP-1 data with every mediator observed (R = 1, gR = 1)."""
    from scipy.special import expit

    rng = np.random.default_rng(seed)
    w = rng.binomial(1, 0.5, (n, 2)).astype(float)
    a = rng.binomial(1, expit(w[:, 0] - w[:, 1]))
    s = rng.binomial(2, expit(-1 + w[:, 0] / 4 - w[:, 1] / 3 + a / 2)).astype(float)
    y = rng.binomial(1, expit(-2 + a / 2 + w[:, 0] / 2 - s / 2))
    c = rng.binomial(1, expit(2 + w[:, 0] / 2 - w[:, 1] / 3))
    return Dataset(w, a, np.ones(n, int), s, c, c * y, design_gr=np.ones(n))


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
