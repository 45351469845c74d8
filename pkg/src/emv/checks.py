"""Self-verification battery behind ``emv verify``.

Each check returns a :class:`CheckResult`; status is PASS, FAIL or SKIP.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .closed_form import (ProblemSpec, classical_value, default_hjb_grid, dirac_convergence_check, gap_coefficients,
                          gap_monotone_below, lagrange_w,
                          optimal_policy, optimal_value, value_gap, verify_hjb)
from .emv_learner import (PolicyParams, Trajectory, ValueParams, cost, gradients)
from .errors import EMVError
from .gaussian_policy import (AffineGaussianPolicy, improvement_sequence, optimal_affine_policy,
                              optimal_quadratic_value)
from .market_sim import PathGrid, simulate_exploratory_wealth


@dataclass
class CheckResult:
    name: str
    status: str
    value: float = float("nan")
    tol: float = float("nan")
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        return f"{self.status}\t{self.name}\tvalue={self.value:.3e}\ttol={self.tol:.1e}\t{self.detail}"


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    return wrapper


def signed_value(spec, w, sign=1.0):
    """The closed-form value with the sign of its exploration term scaled by ``sign``.

    sign = 1 is the true value; sign = -1 is the mutation fixture used to
    confirm that the HJB check can fail.
    """
    def v(t, x):
        return classical_value(t, x, w, spec) + sign * value_gap(t, spec)
    return v


@_timed
def check_hjb(spec, tol=1e-6, n=50, h=1e-4, sign=1.0):
    if spec.lam == 0:
        w = lagrange_w(spec)
        tg, xg = default_hjb_grid(spec, w, n, n, h)
        res = verify_hjb(lambda t, x: classical_value(t, x, w, spec), spec, tg, xg, h)
        return CheckResult("hjb_classical", "PASS" if res <= tol else "FAIL", res, tol, f"d={spec.d}")
    w = lagrange_w(spec)
    tg, xg = default_hjb_grid(spec, w, n, n, h)
    res = verify_hjb(signed_value(spec, w, sign), spec, tg, xg, h)
    return CheckResult("hjb", "PASS" if res <= tol else "FAIL", res, tol, f"d={spec.d} grid={n}x{n}")


@_timed
def check_improvement(spec, rng, n_starts=20, tol=1e-10):
    if spec.lam == 0:
        return CheckResult("improvement_fixed_point", "SKIP", detail="lambda=0")
    d = spec.d
    w = lagrange_w(spec)
    target = optimal_affine_policy(spec)
    vstar = optimal_quadratic_value(spec, w)
    worst = 0.0
    for _ in range(n_starts):
        B = rng.standard_normal((d, d))
        pi0 = AffineGaussianPolicy(rng.standard_normal(d), B @ B.T + 0.1 * np.eye(d), rng.normal(), spec.T)
        seq = improvement_sequence(pi0, spec, w, 2)
        pi2, v2 = seq[2]
        worst = max(worst,
                    np.max(np.abs(pi2.alpha - target.alpha)),
                    np.max(np.abs(pi2.sigma_base - target.sigma_base)),
                    abs(pi2.beta - target.beta),
                    abs(v2.rate - vstar.rate))
    return CheckResult("improvement_fixed_point", "PASS" if worst <= tol else "FAIL", worst, tol, f"starts={n_starts}")


@_timed
def check_dirac(spec, tol=1e-10, t=0.0):
    base = ProblemSpec(spec.T, spec.z, spec.x0, 0.1, spec.market)
    lams = 10.0 ** -np.arange(1, 9)
    w = lagrange_w(base)
    rep = dirac_convergence_check(t, spec.x0, w, base, lams)
    gaps = np.array([float(value_gap(t, ProblemSpec(spec.T, spec.z, spec.x0, lam, spec.market))) for lam in lams])
    P, Q = gap_coefficients(t, base)
    envelope = lams * (abs(P) + Q * np.abs(np.log(lams)))
    mono = lams < gap_monotone_below(t, base)
    ok_mono = bool(np.all(np.diff(np.abs(gaps[mono])) < 0)) and bool(np.all(gaps[mono] > 0))
    ok_env = bool(np.all(np.abs(gaps) <= envelope * (1 + 1e-12)))
    bad = rep.mean_spread > tol or rep.slope_spread > tol or not (ok_mono and ok_env) or abs(gaps[-1]) > 1e-5
    return CheckResult("lambda_to_zero", "FAIL" if bad else "PASS", max(rep.mean_spread, rep.slope_spread), tol,
                       f"final_gap={gaps[-1]:.2e} monotone_from={lams[mono][0] if mono.any() else float('nan'):.0e}")


@_timed
def check_gradients(spec, rng, n_points=10, tol=1e-5):
    if spec.lam == 0:
        return CheckResult("gradients", "SKIP", detail="lambda=0")
    worst = gradient_check(spec.d, spec.lam, spec.T, rng, n_points)
    return CheckResult("gradients", "PASS" if worst <= tol else "FAIL", worst, tol, f"points={n_points}")


def random_learner_point(d, T, rng, n_steps=20):
    theta = ValueParams(*rng.normal(size=3), theta3=float(rng.uniform(0.05, 1.0)))
    L = np.tril(0.3 * rng.standard_normal((d, d)), -1) + np.diag(rng.uniform(0.5, 2.0, d))
    phi = PolicyParams(rng.standard_normal(d), L, float(rng.uniform(0.05, 1.0)))
    times = np.linspace(0, T, n_steps + 1)
    batch = [Trajectory(times, 1.0 + np.cumsum(np.r_[0.0, 0.1 * rng.standard_normal(n_steps)])) for _ in range(2)]
    return theta, phi, batch, float(rng.normal(2.0, 0.5))


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(d, lam, T, rng, n_points=50, h=1e-6):
    """Worst relative error between analytic and central-difference gradients."""
    worst = 0.0
    for _ in range(n_points):
        theta, phi, batch, w = random_learner_point(d, T, rng)
        g = gradients(theta, phi, batch, lam, w, T)

        def c_theta(i, e):
            arr = theta.as_array()
            arr[i] += e
            return cost(ValueParams(*arr), phi, batch, lam, w, T)

        for i in range(4):
            fd = (c_theta(i, h) - c_theta(i, -h)) / (2 * h)
            worst = max(worst, _rel(g.theta[i], fd) if abs(fd) > 1e-7 or abs(g.theta[i]) > 1e-7 else 0.0)

        def c_phi(kind, idx, e):
            if kind == "phi3":
                p = PolicyParams(phi.phi1, phi.phi2_chol, phi.phi3 + e)
            elif kind == "phi1":
                v = phi.phi1.copy()
                v[idx] += e
                p = PolicyParams(v, phi.phi2_chol, phi.phi3)
            else:
                Lm = phi.phi2_chol.copy()
                Lm[idx] += e
                p = PolicyParams(phi.phi1, Lm, phi.phi3)
            return cost(theta, p, batch, lam, w, T)

        fd = (c_phi("phi3", None, h) - c_phi("phi3", None, -h)) / (2 * h)
        worst = max(worst, _rel(g.phi3, fd))
        for i in range(d):
            for j in range(i + 1):
                fd = (c_phi("L", (i, j), h) - c_phi("L", (i, j), -h)) / (2 * h)
                a = g.phi2_chol[i, j]
                worst = max(worst, _rel(a, fd) if abs(fd) > 1e-7 or abs(a) > 1e-7 else 0.0)
            fd = (c_phi("phi1", i, h) - c_phi("phi1", i, -h)) / (2 * h)
            worst = max(worst, abs(fd - g.phi1[i]))
    return worst


@_timed
def check_mean(spec, n_paths, seed, threads=1, dt=1 / 252):
    w = lagrange_w(spec)
    grid = PathGrid.uniform(spec.T, int(round(spec.T / dt)))
    if spec.lam > 0:
        policy = _OptimalPolicy(spec)
    else:
        policy = _ClassicalPolicy(spec)
    path = simulate_exploratory_wealth(policy, spec.market, grid, spec.x0, w, seed, n_paths=n_paths,
                                       mode="aggregate", threads=threads)
    xt = path.terminal
    se = xt.std(ddof=1) / math.sqrt(xt.size)
    dev = abs(xt.mean() - spec.z) / se
    return CheckResult("mean_terminal_wealth", "PASS" if dev <= 3 else "FAIL", dev, 3.0,
                       f"mean={xt.mean():.5f} z={spec.z} se={se:.2e}")


class _OptimalPolicy:
    def __init__(self, spec):
        self.spec = spec
        self.affine = optimal_affine_policy(spec)

    def mean(self, t, x, w):
        return self.affine.mean(t, x, w)

    def covariance(self, t):
        return self.affine.covariance(t)


class _ClassicalPolicy(_OptimalPolicy):
    def __init__(self, spec):
        self.spec = spec
        self.alpha = -np.linalg.solve(spec.market.sigma, spec.market.rho)

    def mean(self, t, x, w):
        return np.multiply.outer(np.asarray(x, dtype=float) - w, self.alpha)

    def covariance(self, t):
        return np.zeros((self.spec.d, self.spec.d))


def run_all(spec: ProblemSpec, seed=0, n_paths=20000, tol=1e-6, grid=50, h=1e-4, sign=1.0, threads=1):
    rng = np.random.default_rng(seed)
    results = []
    for fn, args in ((check_hjb, (spec, tol, grid, h, sign)),
                     (check_improvement, (spec, rng)),
                     (check_dirac, (spec,)),
                     (check_gradients, (spec, rng)),
                     (check_mean, (spec, n_paths, seed, threads))):
        try:
            results.append(fn(*args))
        except (EMVError, np.linalg.LinAlgError) as exc:
            results.append(CheckResult(fn.__name__.replace("check_", ""), "FAIL", detail=f"error: {exc}"))
    if spec.lam == 0:
        results.append(CheckResult("hjb_exploratory", "SKIP", detail="lambda=0"))
    return results


__all__ = ["CheckResult", "run_all", "gradient_check", "random_learner_point", "signed_value",
           "optimal_value", "optimal_policy"]
