import math

import numpy as np
import pytest

from emv.closed_form import (ProblemSpec, classical_control, classical_value, default_hjb_grid,
                             dirac_convergence_check, gap_coefficients, gap_monotone_below, gaussian_entropy,
                             hjb_residual, lagrange_w, optimal_policy, optimal_value, value_gap, verify_hjb)
from emv.errors import ConvexityError, DegenerateMarketError, DomainError, InputError
from emv.market_sim import MarketParams

from conftest import random_market

# independent oracle: w = (z e^{a} - x0) / (e^{a} - 1), a = 0.16
W1 = (1.4 * math.exp(0.16) - 1.0) / (math.exp(0.16) - 1.0)


def test_lagrange_w_d1(spec1):
    assert lagrange_w(spec1) == pytest.approx(W1, rel=1e-14)
    assert W1 == pytest.approx(3.705331, abs=1e-6)


def test_lagrange_w_zero_rho():
    m = MarketParams([0.0], [[0.2]], 0.0)
    with pytest.raises(DegenerateMarketError):
        lagrange_w(ProblemSpec(1.0, 1.4, 1.0, 0.1, m))


def test_classical_control_d1(spec1):
    # -(rho / sigma) (x - w) = -2 (x - w)
    assert classical_control(0.0, 1.0, W1, spec1) == pytest.approx([-2.0 * (1.0 - W1)])


def test_optimal_policy_d1(spec1):
    law = optimal_policy(0.25, 1.0, W1, spec1)
    assert law.mean == pytest.approx([-2.0 * (1.0 - W1)])
    # lam / (2 sigma^2) e^{rho^2 tau}
    assert law.covariance[0, 0] == pytest.approx(0.1 / 0.08 * math.exp(0.16 * 0.75))


def test_optimal_value_terminal(spec1):
    assert optimal_value(1.0, 2.0, W1, spec1) == pytest.approx((2.0 - W1) ** 2 - (W1 - 1.4) ** 2)


def test_optimal_value_hand_d1(spec1):
    t, x = 0.3, 1.2
    tau = 0.7
    lam, r2 = 0.1, 0.16
    expected = ((x - W1) ** 2 * math.exp(-r2 * tau) + lam / 4 * r2 * (1 - t**2)
                - lam / 2 * (r2 - math.log(0.04) + math.log(math.pi * lam)) * tau - (W1 - 1.4) ** 2)
    assert optimal_value(t, x, W1, spec1) == pytest.approx(expected, rel=1e-13)


def test_time_domain(spec1):
    with pytest.raises(DomainError):
        optimal_value(1.5, 1.0, W1, spec1)


def test_exploratory_needs_lambda(market1):
    spec = ProblemSpec(1.0, 1.4, 1.0, 0.0, market1)
    with pytest.raises(InputError):
        optimal_value(0.0, 1.0, 2.0, spec)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_hjb_residual_small(d):
    rng = np.random.default_rng(d)
    spec = ProblemSpec(1.0, 1.4, 1.0, 0.1, random_market(rng, d))
    w = lagrange_w(spec)
    tg, xg = default_hjb_grid(spec, w, 12, 12)
    assert verify_hjb(lambda t, x: optimal_value(t, x, w, spec), spec, tg, xg) < 1e-6


def test_hjb_detects_wrong_constant():
    rng = np.random.default_rng(2)
    spec = ProblemSpec(1.0, 1.4, 1.0, 0.1, random_market(rng, 3))
    w = lagrange_w(spec)
    tg, xg = default_hjb_grid(spec, w, 6, 6)
    # the constant without the factor d on ln(pi lam) violates the equation when d > 1
    bad = lambda t, x: optimal_value(t, x, w, spec) + 0.05 * (1 - 3) * math.log(math.pi * 0.1) * (1 - t)
    assert verify_hjb(bad, spec, tg, xg) > 1e-3


def test_classical_hjb(spec1):
    spec = ProblemSpec(1.0, 1.4, 1.0, 0.0, spec1.market)
    w = lagrange_w(spec)
    tg, xg = default_hjb_grid(spec, w, 8, 8)
    assert verify_hjb(lambda t, x: classical_value(t, x, w, spec), spec, tg, xg) < 1e-6


def test_hjb_concave_raises(spec1):
    with pytest.raises(ConvexityError):
        hjb_residual(lambda t, x: -(x**2) + 0 * t, spec1, 0.5, 1.0)


def test_policy_generator_residual(spec1):
    w = lagrange_w(spec1)
    tg, xg = default_hjb_grid(spec1, w, 5, 5)
    r = verify_hjb(lambda t, x: optimal_value(t, x, w, spec1), spec1, tg, xg,
                   policy_fn=lambda t, x: optimal_policy(float(t), float(x), w, spec1))
    assert r < 1e-6


def test_value_gap_limit(spec1):
    gaps = [float(value_gap(0.0, ProblemSpec(1.0, 1.4, 1.0, lam, spec1.market))) for lam in 10.0 ** -np.arange(1, 9)]
    assert abs(gaps[-1]) < 1e-6


def test_gap_coefficients_reproduce_gap(spec1):
    P, Q = gap_coefficients(0.2, spec1)
    assert value_gap(0.2, spec1) == pytest.approx(0.1 * (P - Q * math.log(0.1)))
    assert gap_monotone_below(0.2, spec1) > 0


def test_gaussian_entropy():
    assert gaussian_entropy([[1.0]]) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))
    C = np.diag([2.0, 3.0])
    assert gaussian_entropy(C) == pytest.approx(math.log(2 * math.pi * math.e) + 0.5 * math.log(6.0))


def test_dirac_report(spec1):
    rep = dirac_convergence_check(0.0, 1.0, W1, spec1, [1e-1, 1e-3, 1e-6])
    assert rep.mean_spread == 0.0
    assert rep.slope_spread < 1e-12
    with pytest.raises(InputError):
        dirac_convergence_check(0.0, 1.0, W1, spec1, [1e-3, 1e-1])
