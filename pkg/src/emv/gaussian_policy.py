"""State-affine Gaussian policies, their exact values and policy improvement.

A policy N(alpha (x - w), Sigma e^{beta (T - t)}) has value

    V(t, x) = (x - w)^2 e^{k' tau} + F(t),
    k'  = 2 rho' sigma alpha + alpha' sigma' sigma alpha,
    F(t) = -(w - z)^2 + s (e^{k tau} - 1) / k - (lam / 2)(c tau + d beta tau^2 / 2),

with s = trace(sigma Sigma sigma'), k = beta + k', c = d ln(2 pi e) + ln|Sigma|
and tau = T - t.  For k = 0 the middle term is s tau.  Improvement maps any
such value to the policy with mean -sigma^{-1} rho (x - w) and covariance
(sigma' sigma)^{-1} lam / V_xx, which stays in the same family.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closed_form import ProblemSpec
from .errors import ConvexityError, InputError

K_BRANCH_TOL = 1e-9
LOG_2PIE = np.log(2 * np.pi * np.e)


@dataclass(frozen=True)
class AffineGaussianPolicy:
    alpha: np.ndarray
    sigma_base: np.ndarray
    beta: float
    T: float

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        base = np.atleast_2d(np.asarray(self.sigma_base, dtype=float))
        if base.shape != (alpha.size, alpha.size):
            raise InputError("sigma_base shape does not match alpha")
        base = 0.5 * (base + base.T)
        try:
            chol = np.linalg.cholesky(base)
        except np.linalg.LinAlgError:
            raise InputError("sigma_base must be positive definite") from None
        if not np.isfinite(self.beta):
            raise InputError("beta must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma_base", base)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "_chol", chol)

    @property
    def d(self) -> int:
        return self.alpha.size

    @property
    def base_chol(self) -> np.ndarray:
        return self._chol

    def mean(self, t, x, w):
        return np.multiply.outer(np.asarray(x, dtype=float) - w, self.alpha)

    def covariance(self, t) -> np.ndarray:
        return self.sigma_base * np.exp(self.beta * (self.T - t))

    def covariance_chol(self, t) -> np.ndarray:
        return self._chol * np.exp(0.5 * self.beta * (self.T - t))

    def log_det_base(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))


def optimal_affine_policy(spec: ProblemSpec) -> AffineGaussianPolicy:
    """The optimal exploratory policy written in the affine family."""
    m = spec.market
    if not spec.lam > 0:
        raise InputError("lambda must be positive")
    return AffineGaussianPolicy(
        alpha=-np.linalg.solve(m.sigma, m.rho),
        sigma_base=np.linalg.inv(m.gram) * spec.lam / 2.0,
        beta=m.rho_sq,
        T=spec.T,
    )


def entropy(policy: AffineGaussianPolicy, t) -> float:
    """(d/2) ln(2 pi e) + ln|Sigma| / 2 + (d/2) beta (T - t)."""
    d = policy.d
    return 0.5 * d * LOG_2PIE + 0.5 * policy.log_det_base() + 0.5 * d * policy.beta * (policy.T - np.asarray(t))


@dataclass(frozen=True)
class QuadraticValue:
    """V(t, x) = quad_coef(t) (x - w)^2 + free_term(t), with quad_coef = scale e^{rate tau}.

    The free term is s (e^{k tau} - 1)/k - (lam/2)(c tau + d beta tau^2 / 2) - (w - z)^2,
    which covers every value produced by :func:`value_of_policy`.
    """

    T: float
    w: float
    z: float
    rate: float
    s: float = 0.0
    k: float = 0.0
    c: float = 0.0
    beta: float = 0.0
    lam: float = 0.0
    d: int = 1
    scale: float = 1.0

    @property
    def k_branch_zero(self) -> bool:
        return abs(self.k) < K_BRANCH_TOL

    def quad_coef(self, t):
        return self.scale * np.exp(self.rate * (self.T - np.asarray(t)))

    def free_term(self, t):
        tau = self.T - np.asarray(t, dtype=float)
        if self.k_branch_zero:
            growth = self.s * tau
        else:
            growth = self.s * np.expm1(self.k * tau) / self.k
        return growth - 0.5 * self.lam * (self.c * tau + 0.5 * self.d * self.beta * tau**2) - (self.w - self.z) ** 2

    def __call__(self, t, x):
        return self.quad_coef(t) * (np.asarray(x) - self.w) ** 2 + self.free_term(t)

    def v_x(self, t, x):
        return 2.0 * self.quad_coef(t) * (np.asarray(x) - self.w)

    def v_xx(self, t, x=None):
        return 2.0 * self.quad_coef(t)


def value_of_policy(policy: AffineGaussianPolicy, spec: ProblemSpec, w: float) -> QuadraticValue:
    """Exact value of an affine Gaussian policy (Feynman-Kac solution)."""
    m = spec.market
    if policy.d != m.d:
        raise InputError("policy dimension does not match the market")
    sa = m.sigma @ policy.alpha
    rate = 2.0 * float(m.rho @ sa) + float(sa @ sa)
    s = float(np.trace(m.sigma @ policy.sigma_base @ m.sigma.T))
    return QuadraticValue(
        T=spec.T, w=w, z=spec.z, rate=rate, s=s, k=policy.beta + rate,
        c=m.d * LOG_2PIE + policy.log_det_base(), beta=policy.beta, lam=spec.lam, d=m.d,
    )


def optimal_quadratic_value(spec: ProblemSpec, w: float) -> QuadraticValue:
    return value_of_policy(optimal_affine_policy(spec), spec, w)


def improve(value: QuadraticValue, spec: ProblemSpec) -> AffineGaussianPolicy:
    """Gaussian improvement: mean -sigma^{-1} rho V_x / V_xx, covariance (sigma'sigma)^{-1} lam / V_xx."""
    if not value.scale > 0:
        raise ConvexityError("value function is not convex in x (quad_coef <= 0)")
    if not spec.lam > 0:
        raise InputError("lambda must be positive")
    m = spec.market
    return AffineGaussianPolicy(
        alpha=-np.linalg.solve(m.sigma, m.rho),
        sigma_base=np.linalg.inv(m.gram) * spec.lam / (2.0 * value.scale),
        beta=-value.rate,
        T=spec.T,
    )


def improvement_sequence(pi0: AffineGaussianPolicy, spec: ProblemSpec, w: float, n_iters: int):
    """[(pi_0, V^{pi_0}), (pi_1, V^{pi_1}), ...] with n_iters improvement steps."""
    out = [(pi0, value_of_policy(pi0, spec, w))]
    for _ in range(n_iters):
        policy = improve(out[-1][1], spec)
        out.append((policy, value_of_policy(policy, spec, w)))
    return out


def sample_action(policy: AffineGaussianPolicy, t, x, w, rng: np.random.Generator, size=None):
    """Draw u ~ N(alpha (x - w), Sigma e^{beta (T - t)}) via the Cholesky factor."""
    L = policy.covariance_chol(t)
    shape = (policy.d,) if size is None else (size, policy.d)
    return policy.mean(t, x, w) + rng.standard_normal(shape) @ L.T
