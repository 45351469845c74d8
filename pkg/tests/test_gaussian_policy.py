import math

import numpy as np
import pytest

from emv.closed_form import ProblemSpec, lagrange_w, optimal_value
from emv.errors import ConvexityError, InputError
from emv.gaussian_policy import (AffineGaussianPolicy, QuadraticValue, entropy, improve, improvement_sequence,
                                 optimal_affine_policy, optimal_quadratic_value, sample_action, value_of_policy)

from conftest import random_market


def test_optimal_affine_matches_closed_form(spec1):
    pol = optimal_affine_policy(spec1)
    assert pol.alpha == pytest.approx([-2.0])
    assert pol.beta == pytest.approx(0.16)
    assert pol.sigma_base[0, 0] == pytest.approx(0.1 / (2 * 0.04))


@pytest.mark.parametrize("d", [1, 3])
def test_value_of_optimal_is_optimal_value(d):
    rng = np.random.default_rng(10 + d)
    spec = ProblemSpec(1.0, 1.4, 1.0, 0.1, random_market(rng, d))
    w = lagrange_w(spec)
    v = optimal_quadratic_value(spec, w)
    assert v.k_branch_zero
    t = np.linspace(0, 1, 7)
    x = np.linspace(-1, 4, 7)
    assert np.allclose(v(t, x), optimal_value(t, x, w, spec), atol=1e-12)


def test_value_terminal_condition(spec1, rng):
    pol = AffineGaussianPolicy([0.5], [[0.3]], 0.7, 1.0)
    v = value_of_policy(pol, spec1, 3.0)
    assert v(1.0, 2.0) == pytest.approx(1.0 - (3.0 - 1.4) ** 2)


def test_value_satisfies_policy_pde(spec1):
    # v_t + drift v_x + diffusion^2 v_xx / 2 - lam H = 0 by central differences
    pol = AffineGaussianPolicy([0.5], [[0.3]], 0.7, 1.0)
    w = 3.0
    v = value_of_policy(pol, spec1, w)
    m = spec1.market
    h = 1e-4
    for t, x in [(0.2, 1.0), (0.6, 4.0)]:
        vt = (v(t + h, x) - v(t - h, x)) / (2 * h)
        u = pol.alpha[0] * (x - w)
        drift = 0.4 * 0.2 * u
        diff2 = (0.2 * u) ** 2 + 0.04 * pol.covariance(t)[0, 0]
        res = vt + drift * v.v_x(t, x) + 0.5 * diff2 * v.v_xx(t, x) - 0.1 * entropy(pol, t)
        assert abs(res) < 1e-6


def test_k_zero_branch_continuity(spec1):
    pol = AffineGaussianPolicy([-2.0], [[0.3]], 0.16, 1.0)
    v0 = value_of_policy(pol, spec1, 3.0)
    assert v0.k_branch_zero
    near = value_of_policy(AffineGaussianPolicy([-2.0], [[0.3]], 0.16 + 1e-7, 1.0), spec1, 3.0)
    assert not near.k_branch_zero
    assert v0(0.0, 1.0) == pytest.approx(near(0.0, 1.0), abs=1e-6)


def test_improvement_reaches_optimum_in_two_steps(rng):
    for _ in range(10):
        d = int(rng.integers(1, 6))
        spec = ProblemSpec(1.0, 1.4, 1.0, float(rng.uniform(0.01, 1)), random_market(rng, d))
        w = lagrange_w(spec)
        B = rng.standard_normal((d, d))
        pi0 = AffineGaussianPolicy(rng.standard_normal(d), B @ B.T + 0.1 * np.eye(d), rng.normal(), 1.0)
        seq = improvement_sequence(pi0, spec, w, 2)
        target = optimal_affine_policy(spec)
        pi2 = seq[2][0]
        assert np.allclose(pi2.alpha, target.alpha, atol=1e-10)
        assert np.allclose(pi2.sigma_base, target.sigma_base, atol=1e-10)
        assert pi2.beta == pytest.approx(target.beta, abs=1e-10)


def test_improve_rejects_nonconvex(spec1):
    v = QuadraticValue(T=1.0, w=3.0, z=1.4, rate=0.1, scale=-1.0)
    with pytest.raises(ConvexityError):
        improve(v, spec1)


def test_policy_validation():
    with pytest.raises(InputError):
        AffineGaussianPolicy([1.0], [[-1.0]], 0.0, 1.0)
    with pytest.raises(InputError):
        AffineGaussianPolicy([1.0, 2.0], [[1.0]], 0.0, 1.0)


def test_sample_action_moments(rng):
    pol = AffineGaussianPolicy([1.0, -1.0], [[0.5, 0.1], [0.1, 0.3]], 0.2, 1.0)
    u = sample_action(pol, 0.5, 2.0, 1.0, rng, size=40000)
    assert np.allclose(u.mean(axis=0), [1.0, -1.0], atol=0.02)
    assert np.allclose(np.cov(u.T), pol.covariance(0.5), atol=0.02)


def test_entropy_closed_form():
    pol = AffineGaussianPolicy([0.0], [[2.0]], 0.5, 1.0)
    assert entropy(pol, 0.0) == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 2.0) + 0.25)
