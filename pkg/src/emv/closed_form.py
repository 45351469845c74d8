"""Analytic solutions of the classical and entropy-regularised MV problems.

The symbol ``pi`` appearing in ``ln(pi * lam)`` below is the circle constant
3.14159..., never a policy.

Throughout, ``tau = T - t`` and ``y = x - w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvexityError, DegenerateMarketError, DomainError, InputError
from .market_sim import MarketParams


@dataclass(frozen=True)
class ProblemSpec:
    T: float
    z: float
    x0: float
    lam: float
    market: MarketParams

    def __post_init__(self):
        if not self.T > 0:
            raise InputError("horizon T must be positive")
        if not self.lam >= 0:
            raise InputError("temperature lambda must be non-negative")

    @property
    def d(self) -> int:
        return self.market.d


@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        try:
            np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise InputError("covariance must be symmetric positive definite") from None


def log_det_gram(market: MarketParams) -> float:
    """ln |sigma' sigma| via the Cholesky factor."""
    try:
        L = np.linalg.cholesky(market.gram)
    except np.linalg.LinAlgError:
        raise DegenerateMarketError("sigma' sigma is not positive definite") from None
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _as_real(a):
    a = np.asarray(a)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(float)


def _check_time(t, spec):
    t = _as_real(t)
    if np.any(t < -1e-12) or np.any(t > spec.T + 1e-12):
        raise DomainError(f"t must lie in [0, {spec.T}]")
    return t


def _require_exploration(spec):
    if not spec.lam > 0:
        raise InputError("exploratory formulas need lambda > 0; use the classical_* functions")


def lagrange_w(spec: ProblemSpec) -> float:
    """w = (z e^{rho'rho T} - x0) / (e^{rho'rho T} - 1), so that E[X_T] = z."""
    a = spec.market.rho_sq * spec.T
    if a == 0:
        raise DegenerateMarketError("zero market price of risk: target is unreachable")
    if a > 700:
        return float(spec.z)
    growth = np.expm1(a)
    return float((spec.z * (growth + 1.0) - spec.x0) / growth)


def optimal_value(t, x, w, spec: ProblemSpec):
    """Optimal value V(t, x; w) of the exploratory problem.

    V = y^2 e^{-rho'rho tau} + (lam d / 4) rho'rho (T^2 - t^2)
        - (lam d / 2) (rho'rho T - ln|sigma'sigma| / d + ln(pi lam)) tau - (w - z)^2.
    """
    _require_exploration(spec)
    t = _check_time(t, spec)
    return classical_value(t, x, w, spec) + value_gap(t, spec)


def optimal_policy(t, x, w, spec: ProblemSpec) -> GaussianLaw:
    """N(-sigma^{-1} rho (x - w), (sigma'sigma)^{-1} (lam / 2) e^{rho'rho (T - t)})."""
    _require_exploration(spec)
    t = float(_check_time(t, spec))
    m = spec.market
    cov = np.linalg.inv(m.gram) * (spec.lam / 2.0) * np.exp(m.rho_sq * (spec.T - t))
    return GaussianLaw(mean=classical_control(t, x, w, spec), covariance=0.5 * (cov + cov.T))


def classical_value(t, x, w, spec: ProblemSpec):
    t = _check_time(t, spec)
    y = _as_real(x) - w
    return y**2 * np.exp(-spec.market.rho_sq * (spec.T - t)) - (w - spec.z) ** 2


def classical_control(t, x, w, spec: ProblemSpec) -> np.ndarray:
    """u* = -sigma^{-1} rho (x - w); a leading axis is added for array x."""
    _check_time(t, spec)
    coef = np.linalg.solve(spec.market.sigma, spec.market.rho)
    y = np.asarray(x, dtype=float) - w
    return -np.multiply.outer(y, coef)


def value_gap(t, spec: ProblemSpec):
    """V - V^cl; depends on t only."""
    _require_exploration(spec)
    t = _check_time(t, spec)
    m, lam, d, T = spec.market, spec.lam, spec.d, spec.T
    tau = T - t
    log_term = m.rho_sq * T - log_det_gram(m) / d + np.log(np.pi * lam)
    return lam * d / 4.0 * m.rho_sq * (T**2 - t**2) - lam * d / 2.0 * log_term * tau


def gap_coefficients(t, spec: ProblemSpec):
    """(P, Q) with value_gap(t; lam) = lam (P - Q ln lam)."""
    t = float(_check_time(t, spec))
    m, d, T = spec.market, spec.d, spec.T
    tau = T - t
    P = d / 4.0 * m.rho_sq * (T**2 - t**2) - d / 2.0 * (m.rho_sq * T - log_det_gram(m) / d + np.log(np.pi)) * tau
    return P, d / 2.0 * tau


def gap_monotone_below(t, spec: ProblemSpec) -> float:
    """Largest lam below which |value_gap(t; .)| increases strictly in lam.

    d/dlam [lam (P - Q ln lam)] = P - Q - Q ln lam > 0 iff lam < e^{P/Q - 1};
    there P - Q ln lam > Q > 0, so the gap is positive and shrinks to 0 with lam.
    """
    P, Q = gap_coefficients(t, spec)
    if Q == 0:
        return float("inf") if P > 0 else 0.0
    return float(np.exp(P / Q - 1.0))


def hjb_residual(value_fn, spec: ProblemSpec, t, x, h=1e-4, richardson=False):
    """Pointwise residual of the reduced HJB equation by central differences.

    v_t - (rho'rho / 2) v_x^2 / v_xx + (lam / 2)(d - d ln(2 pi e lam / v_xx) + ln|sigma'sigma|)

    With lam = 0 the entropy bracket is dropped (classical HJB).  ``t`` and
    ``x`` broadcast against each other.  The stencil is evaluated in extended
    precision: the second difference loses eps |v| / h^2, which at h = 1e-4 in
    float64 is already 1e-6 for |v| of order one.
    """
    t, x = np.broadcast_arrays(np.asarray(t, dtype=np.longdouble), np.asarray(x, dtype=np.longdouble))

    def derivs(step):
        v0 = value_fn(t, x)
        vt = (value_fn(t + step, x) - value_fn(t - step, x)) / (2 * step)
        vp, vm = value_fn(t, x + step), value_fn(t, x - step)
        return vt, (vp - vm) / (2 * step), (vp - 2 * v0 + vm) / step**2

    vt, vx, vxx = derivs(h)
    if richardson:
        vt2, vx2, vxx2 = derivs(2 * h)
        vt, vx, vxx = (4 * vt - vt2) / 3, (4 * vx - vx2) / 3, (4 * vxx - vxx2) / 3
    if np.any(vxx <= 0):
        bad = np.argwhere(vxx <= 0)[0]
        raise ConvexityError(f"v_xx <= 0 at grid point {tuple(int(i) for i in bad)}")
    m, lam, d = spec.market, spec.lam, spec.d
    res = vt - 0.5 * m.rho_sq * vx**2 / vxx
    if lam > 0:
        res = res + 0.5 * lam * (d - d * np.log(2 * np.pi * np.e * lam / vxx) + log_det_gram(m))
    return res.astype(float)


def default_hjb_grid(spec: ProblemSpec, w, n_t=50, n_x=50, h=1e-4, x_halfwidth=2.0):
    ts = np.linspace(2 * h, spec.T - 2 * h, n_t)
    xs = np.linspace(spec.x0 - x_halfwidth, max(w, spec.x0) + x_halfwidth, n_x)
    return np.meshgrid(ts, xs, indexing="ij")


def verify_hjb(value_fn, spec: ProblemSpec, t_grid, x_grid, h=1e-4, policy_fn=None, richardson=False) -> float:
    """Maximum absolute HJB residual of ``value_fn`` over the grid.

    Without ``policy_fn`` the reduced (minimised) equation is used.  With
    ``policy_fn(t, x) -> GaussianLaw`` the Hamiltonian is evaluated at that
    policy instead: v_t + drift v_x + diffusion^2 v_xx / 2 - lam H, with the
    moments from :func:`emv.market_sim.policy_moments`.
    """
    if policy_fn is None:
        return float(np.max(np.abs(hjb_residual(value_fn, spec, t_grid, x_grid, h, richardson))))
    from .market_sim import policy_moments

    worst = 0.0
    h = np.longdouble(h)
    for t, x in zip(np.ravel(t_grid).astype(np.longdouble), np.ravel(x_grid).astype(np.longdouble)):
        v0 = value_fn(t, x)
        vt = (value_fn(t + h, x) - value_fn(t - h, x)) / (2 * h)
        vp, vm = value_fn(t, x + h), value_fn(t, x - h)
        vx, vxx = (vp - vm) / (2 * h), (vp - 2 * v0 + vm) / h**2
        if vxx <= 0:
            raise ConvexityError(f"v_xx <= 0 at (t={t}, x={x})")
        law = policy_fn(t, x)
        drift, diff2 = policy_moments(law.mean, law.covariance, spec.market)
        ent = gaussian_entropy(law.covariance)
        worst = max(worst, abs(float(vt + drift * vx + 0.5 * diff2 * vxx - spec.lam * ent)))
    return worst


def gaussian_entropy(cov) -> float:
    """Differential entropy (d/2) ln(2 pi e) + ln|cov| / 2."""
    cov = np.atleast_2d(cov)
    L = np.linalg.cholesky(cov)
    return 0.5 * cov.shape[0] * np.log(2 * np.pi * np.e) + float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class DiracReport:
    lambdas: np.ndarray
    means: np.ndarray
    max_eigenvalues: np.ndarray
    slopes: np.ndarray
    mean_spread: float
    slope_spread: float


def dirac_convergence_check(t, x, w, spec: ProblemSpec, lambdas) -> DiracReport:
    """Policy mean and covariance size of the optimal policy along lam -> 0.

    Mean must be constant, max eigenvalue proportional to lam; ``slopes`` are
    eigenvalue / lam and ``slope_spread`` their max relative deviation.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas <= 0) or np.any(np.diff(lambdas) >= 0):
        raise InputError("lambdas must be positive and strictly decreasing")
    means, eigs = [], []
    for lam in lambdas:
        law = optimal_policy(t, x, w, ProblemSpec(spec.T, spec.z, spec.x0, float(lam), spec.market))
        means.append(law.mean)
        eigs.append(np.linalg.eigvalsh(law.covariance)[-1])
    means, eigs = np.array(means), np.array(eigs)
    slopes = eigs / lambdas
    return DiracReport(
        lambdas=lambdas,
        means=means,
        max_eigenvalues=eigs,
        slopes=slopes,
        mean_spread=float(np.max(np.abs(means - means[0]))),
        slope_spread=float(np.max(np.abs(slopes / slopes[0] - 1.0))),
    )
