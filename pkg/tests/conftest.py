import numpy as np
import pytest

from emv.closed_form import ProblemSpec
from emv.market_sim import MarketParams


def random_market(rng, d, rho_norm=(0.3, 0.6)):
    """Moderately conditioned sigma and a market price of risk of order one half."""
    A = rng.standard_normal((d, d))
    sigma = 0.2 * (np.eye(d) + 0.3 * A / np.sqrt(d))
    rho = rng.standard_normal(d)
    rho *= rng.uniform(*rho_norm) / np.linalg.norm(rho)
    return MarketParams.from_rho(rho, sigma, r=0.0)


@pytest.fixture
def market1():
    return MarketParams(mu=[0.08], sigma=[[0.2]], r=0.0)


@pytest.fixture
def spec1(market1):
    return ProblemSpec(T=1.0, z=1.4, x0=1.0, lam=0.1, market=market1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def record(number, ok, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
