import math

import numpy as np
import pytest

from emv.errors import DegenerateMarketError, InputError
from emv.market_sim import (MarketParams, PathGrid, dollar_returns, excess_returns, market_price_of_risk,
                            path_generator, policy_moments, simulate_exploratory_wealth, simulate_price_paths,
                            simulate_prices, wealth_step)


def test_rho_one_asset(market1):
    # (0.08 - 0) / 0.2
    assert market1.rho == pytest.approx([0.4])
    assert market1.rho_sq == pytest.approx(0.16)


def test_rho_solves_transposed_system():
    sigma = np.array([[0.2, 0.05], [0.0, 0.25]])
    mu = np.array([0.05, 0.08])
    m = MarketParams(mu, sigma, 0.01)
    assert np.allclose(sigma.T @ m.rho, mu - 0.01)
    assert np.allclose(market_price_of_risk(m), m.rho)


def test_singular_sigma_rejected():
    with pytest.raises(DegenerateMarketError):
        MarketParams([0.1, 0.1], [[0.2, 0.2], [0.2, 0.2]], 0.0)


def test_shape_mismatch_rejected():
    with pytest.raises(InputError):
        MarketParams([0.1, 0.1], [[0.2]], 0.0)


def test_zero_volatility_price_is_exponential():
    m = MarketParams([0.05], [[1e-12]], 0.0, max_condition=1e20)
    grid = PathGrid.uniform(1.0, 10)
    p = simulate_prices(m, [100.0], grid, path_generator(0, 0))
    assert p[-1, 0] == pytest.approx(100 * math.exp(0.05), rel=1e-9)


def test_log_price_moments(rng):
    m = MarketParams([0.1], [[0.3]], 0.0)
    grid = PathGrid.uniform(1.0, 4)
    paths = simulate_price_paths(m, [1.0], grid, 20000, seed=3)
    lt = np.log(paths[:, -1, 0])
    se = lt.std(ddof=1) / math.sqrt(lt.size)
    assert abs(lt.mean() - (0.1 - 0.045)) < 4 * se
    assert lt.var(ddof=1) == pytest.approx(0.09, rel=0.05)


def test_paths_independent_of_chunking_and_threads():
    m = MarketParams([0.1, 0.05], [[0.2, 0.0], [0.05, 0.3]], 0.0)
    grid = PathGrid.uniform(1.0, 12)
    a = simulate_price_paths(m, [1.0, 2.0], grid, 50, seed=9, chunk=7, threads=3)
    b = simulate_price_paths(m, [1.0, 2.0], grid, 50, seed=9, chunk=50, threads=1)
    assert np.array_equal(a, b)


def test_nonpositive_s0():
    m = MarketParams([0.1], [[0.2]], 0.0)
    with pytest.raises(InputError):
        simulate_prices(m, [0.0], PathGrid.uniform(1, 2), path_generator(0, 0))


def test_wealth_step_hand_value(market1):
    # x + sigma u (rho dt + dW) = 1 + 0.2 * 2 * (0.4 * 0.1 + 0.05)
    assert wealth_step(1.0, np.array([2.0]), 0.1, np.array([0.05]), market1) == pytest.approx(1.036)


def test_dollar_returns_match_wealth_step(market1):
    dW = np.array([[0.03]])
    R = dollar_returns(market1, 0.1, dW)
    assert 1.0 + 2.0 * R[0, 0] == pytest.approx(wealth_step(1.0, np.array([2.0]), 0.1, dW[0], market1))


def test_excess_returns():
    p = np.array([[100.0], [110.0]])
    assert excess_returns(p, 0.0, 1.0)[0, 0] == pytest.approx(0.1)


def test_policy_moments_trace_form():
    sigma = np.array([[0.2, 0.05], [0.0, 0.25]])
    m = MarketParams.from_rho([0.3, 0.2], sigma)
    mean = np.array([1.0, -0.5])
    C = np.array([[0.3, 0.1], [0.1, 0.2]])
    drift, diff2 = policy_moments(mean, C, m)
    assert drift == pytest.approx(m.rho @ sigma @ mean)
    # E|sigma u|^2 for u ~ N(mean, C)
    assert diff2 == pytest.approx(mean @ sigma.T @ sigma @ mean + np.trace(sigma @ C @ sigma.T))


def test_policy_moments_reject_non_psd(market1):
    with pytest.raises(InputError):
        policy_moments(np.array([1.0]), np.array([[-1.0]]), market1)


class _Const:
    def __init__(self, a, c):
        self.a, self.c = np.atleast_1d(a), np.atleast_2d(c)

    def mean(self, t, x, w):
        return np.multiply.outer(np.asarray(x) - w, self.a)

    def covariance(self, t):
        return self.c


def test_sampled_and_aggregate_agree_in_distribution(market1):
    pol = _Const([-2.0], [[0.5]])
    grid = PathGrid.uniform(1.0, 50)
    a = simulate_exploratory_wealth(pol, market1, grid, 1.0, 3.0, seed=1, n_paths=20000, mode="aggregate").terminal
    s = simulate_exploratory_wealth(pol, market1, grid, 1.0, 3.0, seed=2, n_paths=20000, mode="sampled").terminal
    se = math.hypot(a.std(), s.std()) / math.sqrt(20000)
    assert abs(a.mean() - s.mean()) < 4 * se
    assert a.var() == pytest.approx(s.var(), rel=0.08)


def test_point_mass_policy_allowed(market1):
    pol = _Const([-2.0], [[0.0]])
    path = simulate_exploratory_wealth(pol, market1, PathGrid.uniform(1.0, 10), 1.0, 3.0, seed=0, n_paths=3)
    assert path.wealth.shape == (3, 11)


def test_exploratory_deterministic_given_seed(market1):
    pol = _Const([-2.0], [[0.5]])
    g = PathGrid.uniform(1.0, 20)
    a = simulate_exploratory_wealth(pol, market1, g, 1.0, 3.0, seed=5, n_paths=100, mode="sampled", threads=2, chunk=13)
    b = simulate_exploratory_wealth(pol, market1, g, 1.0, 3.0, seed=5, n_paths=100, mode="sampled")
    assert np.array_equal(a.wealth, b.wealth)


def test_grid_validation():
    with pytest.raises(InputError):
        PathGrid(0.0, -1.0, 3)
    with pytest.raises(InputError):
        PathGrid(0.0, 0.5, 3, T=1.0)
