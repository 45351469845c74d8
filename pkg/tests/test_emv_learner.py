import math

import numpy as np
import pytest

from emv.checks import gradient_check
from emv.closed_form import ProblemSpec, lagrange_w, optimal_policy, optimal_value
from emv.emv_learner import (EmvConfig, PolicyParams, SimulatedEnv, Trajectory, ValueParams, apply_leverage,
                             bellman_errors, cost, ground_truth, initial_state, load_checkpoint, rollout,
                             save_checkpoint, set_policy_mean_from_value, train, update_lagrange)
from emv.errors import DivergenceError, InputError
from emv.market_sim import MarketParams


@pytest.fixture
def truth(spec1):
    w = lagrange_w(spec1)
    theta, phi = ground_truth(spec1, w)
    return theta, phi, w


def test_ground_truth_reproduces_optimum(spec1, truth):
    theta, phi, w = truth
    t = np.linspace(0, 1, 9)
    x = np.linspace(-1, 5, 9)
    assert np.allclose(theta.value(t, x, w, 1.0), optimal_value(t, x, w, spec1), atol=1e-13)
    assert phi.phi1 == pytest.approx([2.0])
    law = optimal_policy(0.4, 1.0, w, spec1)
    assert phi.covariance(0.4, 0.1, 1.0) == pytest.approx(law.covariance)
    assert phi.mean(0.4, 1.0, w) == pytest.approx(law.mean)


def _conditional_delta(theta, phi, market, t, x, w, lam, T, dt, nodes=6):
    """E[delta | t, x] by Gauss-Hermite quadrature over the action and dW (d = 1)."""
    z, wts = np.polynomial.hermite_e.hermegauss(nodes)
    wts = wts / wts.sum()
    sd = math.sqrt(phi.covariance(t, lam, T)[0, 0])
    m = phi.mean(t, x, w)[0]
    s, rho = market.sigma[0, 0], market.rho[0]
    ev = 0.0
    for zu, wu in zip(z, wts):
        u = m + sd * zu
        for zw, ww in zip(z, wts):
            x1 = x + s * u * (rho * dt + math.sqrt(dt) * zw)
            ev += wu * ww * theta.value(t + dt, x1, w, T)
    return (ev - theta.value(t, x, w, T)) / dt - lam * phi.entropy(t, lam, T)


def test_mean_bellman_error_is_first_order(spec1, truth):
    theta, phi, w = truth
    for t, x in [(0.1, 1.0), (0.5, 2.0), (0.8, 3.5)]:
        e1 = _conditional_delta(theta, phi, spec1.market, t, x, w, 0.1, 1.0, 1 / 100)
        e2 = _conditional_delta(theta, phi, spec1.market, t, x, w, 0.1, 1.0, 1 / 200)
        assert abs(e2) <= 0.55 * abs(e1)
        assert abs(e1) < 0.05


def test_sampled_bellman_error_mean_near_zero(spec1, truth):
    theta, phi, w = truth
    env = SimulatedEnv(spec1.market, 1 / 50, 50)
    rng = np.random.default_rng(0)
    deltas = []
    for _ in range(400):
        tr = rollout(phi, env.episode_returns(rng), 1.0, w, 0.1, 1.0, 1 / 50, rng)
        deltas.append(bellman_errors(theta, phi, tr, 0.1, w, 1.0))
    d = np.concatenate(deltas)
    assert abs(d.mean()) < 3 * d.std(ddof=1) / math.sqrt(d.size) + 0.05


@pytest.mark.parametrize("d", [1, 3])
def test_gradients_match_finite_differences(d):
    assert gradient_check(d, 0.1, 1.0, np.random.default_rng(d), n_points=5) < 1e-5


def test_cost_hand_value():
    theta = ValueParams(theta1=1.0).with_terminal(0.0, 0.0, 1.0)
    phi = PolicyParams([0.0], [[1.0]], 0.0)
    tr = Trajectory([0.0, 0.5, 1.0], [0.0, 0.0, 0.0])
    # delta = theta1 at every step when lam = 0
    assert cost(theta, phi, [tr], 0.0, 0.0, 1.0) == pytest.approx(0.5 * (1 + 1) * 0.5)


def test_theta0_pinned_by_terminal_condition():
    th = ValueParams(theta1=0.3, theta2=-0.2, theta3=0.1).with_terminal(2.0, 1.4, 1.0)
    assert th.value(1.0, 3.0, 2.0, 1.0) == pytest.approx(1.0 - 0.36)


def test_update_lagrange_hand():
    assert update_lagrange(2.0, [1.0, 2.0], 0.5, 1.4) == pytest.approx(2.0 - 0.5 * 0.1)
    with pytest.raises(InputError):
        update_lagrange(2.0, [], 0.5, 1.4)


def test_lagrange_contraction_on_stationary_input():
    # mean terminal wealth m(w) = a + b w with 0 < b < 1; fixed point w* = (z - a) / b
    a, b, z, alpha = 0.3, 0.4, 1.4, 0.5
    w_star = (z - a) / b
    w = 0.0
    errs = []
    for _ in range(30):
        w = update_lagrange(w, [a + b * w], alpha, z)
        errs.append(abs(w - w_star))
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.allclose(ratios, 1 - alpha * b)


def test_policy_params_validation():
    with pytest.raises(InputError):
        PolicyParams([1.0], [[-1.0]])
    with pytest.raises(InputError):
        PolicyParams([1.0, 1.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InputError):
        ValueParams(theta3=-0.1)


def test_tie_mode_sets_length(spec1):
    theta = ValueParams(theta3=0.16)
    phi = PolicyParams([0.7], [[5.0]], 0.0)
    out = set_policy_mean_from_value(theta, phi, 0.1, mode="tie")
    assert out.phi3 == 0.16
    assert out.phi1 == pytest.approx([5.0 * 0.4])


def test_apply_leverage_cases():
    assert apply_leverage(np.array([3.0, -2.0]), 1.0, 2.0) == pytest.approx([1.2, -0.8])
    assert apply_leverage(np.array([0.5, -0.5]), 1.0, 2.0) == pytest.approx([0.5, -0.5])
    assert np.all(apply_leverage(np.array([0.5, -0.5]), 0.0, 2.0) == 0)


def test_rollout_respects_leverage(spec1):
    phi = PolicyParams([3.0], [[5.0]], 0.16)
    env = SimulatedEnv(spec1.market, 1 / 252, 252)
    rng = np.random.default_rng(1)
    tr = rollout(phi, env.episode_returns(rng), 1.0, 3.7, 0.1, 1.0, 1 / 252, rng, leverage=2.0)
    gross = np.abs(tr.actions).sum(axis=1)
    assert np.all(gross <= 2.0 * np.abs(tr.wealth[:-1]) + 1e-12)


def test_divergence_guard(spec1):
    phi = PolicyParams([400.0], [[1.0]], 0.0)
    env = SimulatedEnv(spec1.market, 1 / 252, 252)
    rng = np.random.default_rng(0)
    with pytest.raises(DivergenceError):
        rollout(phi, env.episode_returns(rng), 1.0, 3.7, 0.1, 1.0, 1 / 252, rng, bound=1e3)


def _small_cfg(**kw):
    base = dict(lam=0.1, z=1.4, T=1.0, dt=1 / 50, x0=1.0, M=200, N=10)
    base.update(kw)
    return EmvConfig(**base)


def test_training_is_deterministic(market1):
    cfg = _small_cfg()
    env = SimulatedEnv(market1, cfg.dt, cfg.n_steps)
    s1, c1 = train(cfg, env, seed=4)
    s2, c2 = train(cfg, env, seed=4)
    assert c1.cost == c2.cost and c1.terminal_wealth == c2.terminal_wealth
    assert np.array_equal(s1.phi.phi1, s2.phi.phi1)


def test_resume_reproduces_continued_run(market1, tmp_path):
    cfg = _small_cfg(M=100)
    env = SimulatedEnv(market1, cfg.dt, cfg.n_steps)
    _, full = train(_small_cfg(M=200), env, seed=7)
    first, _ = train(cfg, env, seed=7)
    save_checkpoint(tmp_path / "ck.txt", first, cfg)
    state, cfg2, _ = load_checkpoint(tmp_path / "ck.txt")
    _, rest = train(cfg2, env, seed=7, state=state)
    assert rest.terminal_wealth == full.terminal_wealth[100:]


def test_checkpoint_round_trip(market1, tmp_path):
    cfg = _small_cfg(M=30, leverage=2.0)
    env = SimulatedEnv(MarketParams.from_rho([0.3, 0.2], [[0.2, 0.05], [0.0, 0.25]]), cfg.dt, cfg.n_steps)
    st, _ = train(cfg, env, seed=1)
    save_checkpoint(tmp_path / "ck.txt", st, cfg)
    st2, cfg2, _ = load_checkpoint(tmp_path / "ck.txt")
    assert cfg2 == cfg
    assert st2.theta == st.theta and st2.w == st.w and st2.episode == st.episode
    assert np.array_equal(st2.phi.phi1, st.phi.phi1)
    assert np.array_equal(st2.phi.phi2_chol, st.phi.phi2_chol)
    assert st2.recent == st.recent


def test_covariance_stays_positive_definite(market1):
    cfg = _small_cfg(M=300, eta_phi=5e-2)
    env = SimulatedEnv(market1, cfg.dt, cfg.n_steps)
    st, curves = train(cfg, env, seed=2)
    assert np.all(np.array(curves.cov_norm) > 0)
    np.linalg.cholesky(st.phi.covariance(0.0, cfg.lam, cfg.T))


def test_lambda_schedule_shrinks_covariance(market1):
    cfg = _small_cfg(M=400, lam_final=1e-6)
    env = SimulatedEnv(market1, cfg.dt, cfg.n_steps)
    _, curves = train(cfg, env, seed=3)
    assert curves.cov_norm[-1] < 1e-4 * curves.cov_norm[0]


def test_config_validation():
    with pytest.raises(InputError):
        EmvConfig(lam=0.0)
    with pytest.raises(InputError):
        EmvConfig(N=0)
    with pytest.raises(InputError):
        EmvConfig(mean_mode="bogus")
