"""Multi-asset GBM market, classical wealth equation and exploratory wealth SDE.

Conventions
-----------
``sigma`` is the d x d volatility matrix whose i-th *column* is the volatility
vector of asset i, so that

    dS_i = S_i (mu_i dt + sigma[:, i] . dW),
    dx   = (sigma u) . (rho dt + dW),      sigma' rho = mu - r 1.

Wealth is discounted and actions ``u`` are discounted dollar amounts held in
each risky asset.

Randomness is organised as one counter-based stream per path (Philox keyed by
the run seed, path index in the high counter word), so a path's draws do not
depend on how paths are chunked or distributed over threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMarketError, InputError, SimulationError

MAX_CONDITION = 1e10


@dataclass(frozen=True)
class MarketParams:
    mu: np.ndarray
    sigma: np.ndarray
    r: float
    max_condition: float = MAX_CONDITION
    rho: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        d = mu.shape[0]
        if sigma.shape != (d, d):
            raise InputError(f"sigma must be {d}x{d}, got {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma)) and np.isfinite(self.r)):
            raise InputError("market parameters must be finite")
        cond = np.linalg.cond(sigma)
        if not np.isfinite(cond) or cond > self.max_condition:
            raise DegenerateMarketError(f"volatility matrix condition number {cond:.3g} exceeds {self.max_condition:.3g}")
        rho = np.linalg.solve(sigma.T, mu - self.r)
        mu.setflags(write=False)
        sigma.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "rho", rho)

    @property
    def d(self) -> int:
        return self.mu.shape[0]

    @property
    def rho_sq(self) -> float:
        return float(self.rho @ self.rho)

    @property
    def gram(self) -> np.ndarray:
        """sigma' sigma, the instantaneous covariance of discounted dollar returns."""
        return self.sigma.T @ self.sigma

    @classmethod
    def from_rho(cls, rho, sigma, r=0.0, **kw):
        """Build the market with a prescribed market price of risk."""
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        return cls(mu=sigma.T @ rho + r, sigma=sigma, r=r, **kw)


@dataclass(frozen=True)
class PathGrid:
    t0: float
    dt: float
    n_steps: int
    T: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InputError("n_steps must be a positive integer")
        if self.T is not None and self.t0 + self.n_steps * self.dt > self.T + 1e-12:
            raise InputError("grid runs past the horizon T")

    @classmethod
    def uniform(cls, T, n_steps, t0=0.0):
        return cls(t0=t0, dt=(T - t0) / n_steps, n_steps=int(n_steps), T=T)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclass(frozen=True)
class WealthPath:
    """Discounted wealth on a grid; ``wealth`` is (n_paths, n_steps + 1)."""

    times: np.ndarray
    wealth: np.ndarray
    actions: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        wealth = np.atleast_2d(np.asarray(self.wealth, dtype=float))
        if times.ndim != 1 or np.any(np.diff(times) <= 0):
            raise InputError("times must be strictly increasing")
        if wealth.shape[-1] != times.shape[0]:
            raise InputError("wealth length does not match times")
        if self.actions is not None and self.actions.shape[:2] != (wealth.shape[0], times.shape[0] - 1):
            raise InputError("actions must be (n_paths, n_steps, d)")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "wealth", wealth)

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]


# ---------------------------------------------------------------- randomness

def path_generator(seed: int, index: int) -> np.random.Generator:
    """Independent stream for path ``index`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(index), 0]))


def _path_normals(seed, start, count, shape):
    out = np.empty((count,) + tuple(shape))
    for k in range(count):
        out[k] = path_generator(seed, start + k).standard_normal(shape)
    return out


def _chunked(n_paths, chunk, fn, threads):
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]
    if threads and threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda b: fn(*b), bounds))
    else:
        parts = [fn(*b) for b in bounds]
    return parts


# ---------------------------------------------------------------- operations

def market_price_of_risk(params: MarketParams) -> np.ndarray:
    """rho solving sigma' rho = mu - r 1."""
    return np.linalg.solve(params.sigma.T, params.mu - params.r)


def _log_increments(params, dt, z):
    # z: (..., n_steps, d) standard normals
    drift = (params.mu - 0.5 * np.sum(params.sigma**2, axis=0)) * dt
    return drift + np.sqrt(dt) * (z @ params.sigma)


def simulate_prices(params: MarketParams, s0, grid: PathGrid, rng: np.random.Generator) -> np.ndarray:
    """One GBM price path, shape (n_steps + 1, d), by exact log stepping."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    if s0.shape != (params.d,) or np.any(s0 <= 0):
        raise InputError("s0 must be a strictly positive vector of length d")
    z = rng.standard_normal((grid.n_steps, params.d))
    logs = np.vstack([np.zeros(params.d), np.cumsum(_log_increments(params, grid.dt, z), axis=0)])
    return s0 * np.exp(logs)


def simulate_price_paths(params, s0, grid, n_paths, seed, threads=1, chunk=2048) -> np.ndarray:
    """Many GBM paths, shape (n_paths, n_steps + 1, d); path k uses stream k."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    if s0.shape != (params.d,) or np.any(s0 <= 0):
        raise InputError("s0 must be a strictly positive vector of length d")

    def block(a, b):
        z = _path_normals(seed, a, b - a, (grid.n_steps, params.d))
        inc = _log_increments(params, grid.dt, z)
        logs = np.concatenate([np.zeros((b - a, 1, params.d)), np.cumsum(inc, axis=1)], axis=1)
        return s0 * np.exp(logs)

    return np.concatenate(_chunked(n_paths, chunk, block, threads), axis=0)


def excess_returns(prices, r, dt) -> np.ndarray:
    """Per-step discounted simple returns S_{k+1}/S_k e^{-r dt} - 1 along axis -2."""
    prices = np.asarray(prices, dtype=float)
    return prices[..., 1:, :] / prices[..., :-1, :] * np.exp(-r * dt) - 1.0


def dollar_returns(params: MarketParams, dt, dW) -> np.ndarray:
    """sigma' (rho dt + dW): the wealth gained per discounted dollar held, per asset."""
    return (params.rho * dt + np.asarray(dW)) @ params.sigma


def wealth_step(x, u, dt, dW, params: MarketParams):
    """x + (sigma u) . (rho dt + dW)."""
    u = np.asarray(u, dtype=float)
    dW = np.asarray(dW, dtype=float)
    out = x + (u @ params.sigma.T) @ (params.rho * dt + dW) if u.ndim == 1 else \
        x + np.sum((u @ params.sigma.T) * (params.rho * dt + dW), axis=-1)
    if not np.all(np.isfinite(out)):
        raise SimulationError("non-finite wealth")
    return out


def _check_psd(C, tol=1e-12):
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not np.allclose(C, C.T, atol=1e-12 * max(1.0, np.abs(C).max())):
        raise InputError("covariance is not symmetric")
    if C.size and np.linalg.eigvalsh(C)[0] < -tol * max(1.0, np.abs(C).max()):
        raise InputError("covariance is not positive semidefinite")
    return C


def policy_moments(m, C, params: MarketParams):
    """Aggregate drift and squared diffusion of the exploratory wealth under N(m, C).

    drift = rho' sigma m,  diffusion^2 = m' sigma' sigma m + trace(sigma' sigma C).
    ``m`` may carry leading batch axes.
    """
    C = _check_psd(C)
    m = np.asarray(m, dtype=float)
    sm = m @ params.sigma.T
    drift = sm @ params.rho
    diff2 = np.sum(sm * sm, axis=-1) + np.trace(params.gram @ C)
    return drift, diff2


def simulate_exploratory_wealth(policy, params: MarketParams, grid: PathGrid, x0, w, seed,
                                n_paths=1, mode="aggregate", threads=1, chunk=4096,
                                keep_actions=False) -> WealthPath:
    """Euler-Maruyama for the exploratory wealth under a Gaussian feedback policy.

    ``policy`` must provide ``mean(t, x, w)`` (vectorised over x, returning
    (n, d)) and ``covariance(t)``.  In ``aggregate`` mode one scalar Brownian
    motion drives the coefficients from :func:`policy_moments`; in ``sampled``
    mode each step draws u ~ N(mean, cov) and applies :func:`wealth_step`.
    """
    if mode not in ("aggregate", "sampled"):
        raise InputError(f"unknown mode {mode!r}")
    d, n, dt = params.d, grid.n_steps, grid.dt
    times = grid.times
    chols = []
    for k in range(n):
        C = np.atleast_2d(policy.covariance(times[k]))
        try:
            chols.append(np.linalg.cholesky(C))
        except np.linalg.LinAlgError:
            # semidefinite (e.g. a point-mass policy): symmetric square root
            try:
                C = _check_psd(C)
            except InputError:
                raise SimulationError("policy covariance not positive semidefinite", step=k) from None
            vals, vecs = np.linalg.eigh(C)
            chols.append(vecs * np.sqrt(np.clip(vals, 0.0, None)))
    covs = [L @ L.T for L in chols]

    def block(a, b):
        m_paths = b - a
        x = np.full(m_paths, float(x0))
        out = np.empty((m_paths, n + 1))
        out[:, 0] = x
        acts = np.empty((m_paths, n, d)) if keep_actions else None
        if mode == "aggregate":
            z = _path_normals(seed, a, m_paths, (n,))
        else:
            z = _path_normals(seed, a, m_paths, (n, 2 * d))
        for k in range(n):
            mean = policy.mean(times[k], x, w)
            if mode == "aggregate":
                drift, diff2 = policy_moments(mean, covs[k], params)
                x = x + drift * dt + np.sqrt(np.maximum(diff2, 0.0) * dt) * z[:, k]
            else:
                u = mean + z[:, k, :d] @ chols[k].T
                x = wealth_step(x, u, dt, np.sqrt(dt) * z[:, k, d:], params)
                if acts is not None:
                    acts[:, k] = u
            if not np.all(np.isfinite(x)):
                raise SimulationError("non-finite wealth", step=k)
            out[:, k + 1] = x
        return out, acts

    parts = _chunked(n_paths, chunk, block, threads)
    wealth = np.concatenate([p[0] for p in parts], axis=0)
    actions = np.concatenate([p[1] for p in parts], axis=0) if keep_actions else None
    return WealthPath(times=times, wealth=wealth, actions=actions)
