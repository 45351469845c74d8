"""EMV learner: Bellman-error critic, Gaussian actor, Lagrange multiplier.

Parametrisations (tau = T - t, y = x - w):

    V^theta(t, x) = y^2 e^{-theta3 tau} + theta2 t^2 + theta1 t + theta0
    pi^phi(. | t, x) = N(-phi1 y, (lam / 2) e^{phi3 tau} L L'),   L = phi2_chol

so that L L' plays the role of (sigma' sigma)^{-1} and phi1 that of
sigma^{-1} rho.  theta0 is pinned by the terminal condition
V(T, x) = y^2 - (w - z)^2.

Per episode the learner

1. rolls out one trajectory with sampled (and optionally leverage-capped)
   actions against the per-step asset returns supplied by the environment,
2. descends theta1, theta2 and the entropy parameters (phi2_chol diagonal,
   phi3) along the exact gradient of the Bellman cost, and theta3 along the
   temporal-difference semi-gradient (the exact theta3 gradient contains
   E[noise^2] terms of order 1/dt and is unusable on sampled transitions),
3. updates phi1 with a score-function estimate whose advantage compares
   the executed action with the mean action under the same asset returns
   (mode ``score``), or rescales phi1 from theta3 and the covariance
   structure (mode ``tie``, d = 1 oriented fallback),
4. every N episodes moves w by stochastic approximation toward E[x_T] = z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import DivergenceError, InputError
from .market_sim import MarketParams, dollar_returns

log = logging.getLogger(__name__)

LOG_2PIE = math.log(2 * math.pi * math.e)


@dataclass(frozen=True)
class ValueParams:
    theta0: float = 0.0
    theta1: float = 0.0
    theta2: float = 0.0
    theta3: float = 0.0

    def __post_init__(self):
        for name in ("theta0", "theta1", "theta2", "theta3"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.theta3 < 0:
            raise InputError("theta3 must be non-negative")

    def value(self, t, x, w, T):
        t = np.asarray(t, dtype=float)
        return (np.asarray(x) - w) ** 2 * np.exp(-self.theta3 * (T - t)) + self.theta2 * t**2 + self.theta1 * t + self.theta0

    def with_terminal(self, w, z, T) -> "ValueParams":
        """Pin theta0 so that V(T, x) = (x - w)^2 - (w - z)^2."""
        return replace(self, theta0=-self.theta2 * T**2 - self.theta1 * T - (w - z) ** 2)

    def as_array(self):
        return np.array([self.theta0, self.theta1, self.theta2, self.theta3])


@dataclass(frozen=True)
class PolicyParams:
    phi1: np.ndarray
    phi2_chol: np.ndarray
    phi3: float = 0.0

    def __post_init__(self):
        phi1 = np.atleast_1d(np.asarray(self.phi1, dtype=float))
        L = np.atleast_2d(np.asarray(self.phi2_chol, dtype=float))
        if L.shape != (phi1.size, phi1.size):
            raise InputError("phi2_chol shape does not match phi1")
        if np.any(np.triu(L, 1) != 0):
            raise InputError("phi2_chol must be lower triangular")
        if np.any(np.diag(L) <= 0):
            raise InputError("phi2_chol must have a positive diagonal")
        object.__setattr__(self, "phi1", phi1)
        object.__setattr__(self, "phi2_chol", L)
        object.__setattr__(self, "phi3", float(self.phi3))

    @property
    def d(self):
        return self.phi1.size

    @classmethod
    def initial(cls, d, phi1=0.0, chol_scale=1.0, phi3=0.0):
        return cls(phi1=np.full(d, float(phi1)) if np.isscalar(phi1) else phi1,
                   phi2_chol=np.eye(d) * chol_scale, phi3=phi3)

    def mean(self, t, x, w):
        return -np.multiply.outer(np.asarray(x, dtype=float) - w, self.phi1)

    def covariance(self, t, lam, T):
        return 0.5 * lam * np.exp(self.phi3 * (T - np.asarray(t))) * (self.phi2_chol @ self.phi2_chol.T)

    def entropy(self, t, lam, T):
        """Gaussian entropy of the policy at time t (vectorised over t)."""
        d = self.d
        return (0.5 * d * (LOG_2PIE + math.log(0.5 * lam)) + float(np.sum(np.log(np.diag(self.phi2_chol))))
                + 0.5 * d * self.phi3 * (T - np.asarray(t, dtype=float)))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    wealth: np.ndarray
    actions: np.ndarray | None = None
    mean_actions: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        wealth = np.asarray(self.wealth, dtype=float)
        if times.shape != wealth.shape or times.size < 2:
            raise InputError("trajectory needs matching times and wealth of length >= 2")
        steps = np.diff(times)
        if abs(times[0]) > 1e-12 or np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, steps[0]):
            raise InputError("trajectory times must start at 0 with uniform positive spacing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "wealth", wealth)

    @property
    def dt(self):
        return float(self.times[1] - self.times[0])

    @property
    def terminal(self):
        return float(self.wealth[-1])


@dataclass(frozen=True)
class EmvConfig:
    lam: float = 0.1
    z: float = 1.4
    T: float = 1.0
    dt: float = 1 / 252
    x0: float = 1.0
    M: int = 20000
    N: int = 10
    eta_theta: float = 5e-3
    eta_theta3: float = 1e-6
    eta_phi: float = 5e-4
    eta_phi1: float = 5e-4
    alpha_w: float = 0.05
    leverage: float | None = None
    mean_mode: str = "score"
    tie: bool = True
    w0: float | None = None
    init_phi1: float = 0.0
    init_chol: float = 1.0
    init_theta3: float = 0.0
    divergence_bound: float | None = None
    lam_final: float | None = None

    def __post_init__(self):
        for name in ("lam", "T", "dt", "eta_theta", "eta_phi", "eta_phi1", "alpha_w"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.eta_theta3 < 0:
            raise InputError("eta_theta3 must be non-negative")
        if not (1 <= self.N <= self.M):
            raise InputError("need 1 <= N <= M")
        if self.mean_mode not in ("score", "tie"):
            raise InputError(f"unknown mean_mode {self.mean_mode!r}")
        if self.leverage is not None and not self.leverage > 0:
            raise InputError("leverage limit must be positive")
        if self.lam_final is not None and not 0 < self.lam_final <= self.lam:
            raise InputError("lam_final must lie in (0, lam]")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    @property
    def bound(self):
        return self.divergence_bound or 1e3 * max(1.0, abs(self.z))

    def lam_at(self, episode):
        """Temperature for an episode; geometric schedule when lam_final is set."""
        if self.lam_final is None or self.M == 1:
            return self.lam
        frac = episode / (self.M - 1)
        return self.lam * (self.lam_final / self.lam) ** frac


def ground_truth(spec, w):
    """Learner parameters that reproduce the analytic optimum for ``spec``.

    theta3 = phi3 = rho'rho, phi1 = sigma^{-1} rho, L L' = (sigma'sigma)^{-1};
    theta2 and theta1 are the t^2 and t coefficients of the optimal value.
    """
    from .closed_form import log_det_gram

    m, lam, d, T = spec.market, spec.lam, spec.d, spec.T
    r2 = m.rho_sq
    theta2 = -lam * d / 4.0 * r2
    theta1 = lam * d / 2.0 * (r2 * T - log_det_gram(m) / d + math.log(math.pi * lam))
    theta = ValueParams(theta1=theta1, theta2=theta2, theta3=r2).with_terminal(w, spec.z, T)
    L = np.linalg.cholesky(np.linalg.inv(m.gram))
    return theta, PolicyParams(phi1=np.linalg.solve(m.sigma, m.rho), phi2_chol=L, phi3=r2)


# ---------------------------------------------------------------- Bellman cost

def _lam_entropy(phi, t, lam, T):
    if lam == 0:
        return np.zeros_like(np.asarray(t, dtype=float))
    return lam * phi.entropy(t, lam, T)


def bellman_errors(theta: ValueParams, phi: PolicyParams, traj: Trajectory, lam, w, T) -> np.ndarray:
    """delta_i = (V(t_{i+1}, x_{i+1}) - V(t_i, x_i)) / dt - lam H(pi_{t_i})."""
    v = theta.value(traj.times, traj.wealth, w, T)
    return np.diff(v) / traj.dt - _lam_entropy(phi, traj.times[:-1], lam, T)


def cost(theta, phi, batch, lam, w, T) -> float:
    """C = 1/2 sum_i delta_i^2 dt over every transition in the batch."""
    if not batch:
        raise InputError("empty batch")
    return float(sum(0.5 * np.sum(bellman_errors(theta, phi, tr, lam, w, T) ** 2) * tr.dt for tr in batch))


@dataclass
class Gradients:
    theta: np.ndarray
    phi1: np.ndarray
    phi2_chol: np.ndarray
    phi3: float


def gradients(theta, phi, batch, lam, w, T) -> Gradients:
    """Exact partial derivatives of :func:`cost`.

    theta0 cancels in the difference quotient and phi1 does not enter C, so
    both components are identically zero.
    """
    if not batch:
        raise InputError("empty batch")
    d = phi.d
    g_theta = np.zeros(4)
    g_diag = 0.0
    g_phi3 = 0.0
    for tr in batch:
        dt, t, x = tr.dt, tr.times, tr.wealth
        delta = bellman_errors(theta, phi, tr, lam, w, T)
        wd = delta * dt
        g_theta[1] += np.sum(wd)
        g_theta[2] += np.sum(wd * np.diff(t**2) / dt)
        dv3 = -(T - t) * np.exp(-theta.theta3 * (T - t)) * (x - w) ** 2
        g_theta[3] += np.sum(wd * np.diff(dv3) / dt)
        g_diag += -lam * np.sum(wd)
        g_phi3 += -lam * 0.5 * d * np.sum(wd * (T - t[:-1]))
    g_chol = np.diag(g_diag / np.diag(phi.phi2_chol))
    return Gradients(theta=g_theta, phi1=np.zeros(d), phi2_chol=g_chol, phi3=float(g_phi3))


def td_theta3_direction(theta, phi, traj, lam, w, T) -> float:
    """Semi-gradient of C in theta3: -sum_i delta_i dV(t_i, x_i)/dtheta3."""
    delta = bellman_errors(theta, phi, traj, lam, w, T)
    t, x = traj.times[:-1], traj.wealth[:-1]
    dv3 = -(T - t) * np.exp(-theta.theta3 * (T - t)) * (x - w) ** 2
    return float(-np.sum(delta * dv3))


# ---------------------------------------------------------------- actor pieces

def update_lagrange(w, terminal_wealths, alpha_w, z) -> float:
    """w - alpha_w (mean(x_T) - z)."""
    terminal_wealths = np.asarray(terminal_wealths, dtype=float)
    if terminal_wealths.size == 0:
        raise InputError("no terminal wealth samples")
    return float(w - alpha_w * (terminal_wealths.mean() - z))


def set_policy_mean_from_value(theta: ValueParams, phi: PolicyParams, lam, mode="score") -> PolicyParams:
    """Apply the improvement structure of the value to the policy.

    The covariance decay follows V_xx: phi3 <- theta3.  In ``tie`` mode phi1 is
    additionally rescaled to length sqrt(2 theta3 / lam) in the metric of
    the covariance structure, keeping its direction; for d = 1 this is the
    exact relation between the optimal mean and covariance.
    """
    out = replace(phi, phi3=theta.theta3)
    if mode == "tie":
        L = phi.phi2_chol
        v = np.linalg.solve(L, phi.phi1)
        norm = np.linalg.norm(v)
        v = v / norm if norm > 0 else np.eye(phi.d)[0]
        target = math.sqrt(max(theta.theta3, 0.0))
        out = replace(out, phi1=L @ v * target)
    return out


def score_phi1_direction(phi, traj, lam, w, T, theta) -> np.ndarray:
    """Score-function estimate of the phi1 gradient of the expected cost.

    sum_i grad log pi(u_i) * [V(t_{i+1}, x_i + u_i.R_i) - V(t_{i+1}, x_i + m_i.R_i)]
    where u_i, m_i are executed sampled and mean actions and R_i the asset
    returns of step i.
    """
    if traj.actions is None or traj.returns is None or traj.mean_actions is None:
        raise InputError("score mode needs actions, mean actions and returns in the trajectory")
    t, x = traj.times[:-1], traj.wealth[:-1]
    y = x - w
    t1 = traj.times[1:]
    x_exec = traj.wealth[1:]
    x_mean = x + np.sum(traj.mean_actions * traj.returns, axis=1)
    adv = theta.value(t1, x_exec, w, T) - theta.value(t1, x_mean, w, T)
    # grad_phi1 log N(u | -phi1 y, C) = -y C^{-1} (u_s - m), with u_s the sampled (pre-cap) action
    L = phi.phi2_chol
    scale = 0.5 * lam * np.exp(phi.phi3 * (T - t))
    resid = traj.sampled_minus_mean if hasattr(traj, "sampled_minus_mean") else traj.actions - traj.mean_actions
    z = np.linalg.solve(L, resid.T)
    cinv_r = np.linalg.solve(L.T, z).T / scale[:, None]
    return -np.sum((y * adv)[:, None] * cinv_r, axis=0)


# ---------------------------------------------------------------- environments

class SimulatedEnv:
    """Episodes of per-step asset returns sigma'(rho dt + dW) from a GBM market."""

    def __init__(self, market: MarketParams, dt: float, n_steps: int):
        self.market, self.dt, self.n_steps = market, dt, n_steps

    @property
    def d(self):
        return self.market.d

    def episode_returns(self, rng: np.random.Generator) -> np.ndarray:
        dW = math.sqrt(self.dt) * rng.standard_normal((self.n_steps, self.d))
        return dollar_returns(self.market, self.dt, dW)


def apply_leverage(u, x, L):
    """Scale u so that sum |u_j| <= L |x|; zero wealth allows no exposure."""
    u = np.asarray(u, dtype=float)
    gross = np.sum(np.abs(u), axis=-1)
    cap = L * np.abs(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(gross > cap, np.where(gross > 0, cap / gross, 0.0), 1.0)
    return u * factor[..., None] if u.ndim > 1 else u * float(factor)


def rollout(phi: PolicyParams, returns: np.ndarray, x0, w, lam, T, dt, rng, leverage=None, bound=np.inf):
    """One episode of sampled actions; returns a Trajectory with actions and returns."""
    n, d = returns.shape
    times = dt * np.arange(n + 1)
    L = phi.phi2_chol
    scale = np.sqrt(0.5 * lam * np.exp(phi.phi3 * (T - times[:-1])))
    noise = (rng.standard_normal((n, d)) @ L.T) * scale[:, None]
    wealth = np.empty(n + 1)
    wealth[0] = x0
    means = np.empty((n, d))
    if leverage is None:
        a = returns @ phi.phi1
        b = np.sum(noise * returns, axis=1)
        y = x0 - w
        for i in range(n):
            y_next = y * (1.0 - a[i]) + b[i]
            wealth[i + 1] = y_next + w
            means[i] = -phi.phi1 * y
            y = y_next
        if not np.all(np.abs(wealth) <= bound):
            raise DivergenceError(f"|x| exceeded {bound:g} (max {np.max(np.abs(wealth)):.3g})")
        actions = means + noise
        return Trajectory(times, wealth, actions=actions, mean_actions=means, returns=returns)

    actions = np.empty((n, d))
    raw_dev = noise
    x = float(x0)
    for i in range(n):
        m = -phi.phi1 * (x - w)
        u = apply_leverage(m + noise[i], x, leverage)
        means[i] = apply_leverage(m, x, leverage)
        actions[i] = u
        x = x + float(u @ returns[i])
        if not abs(x) <= bound:
            raise DivergenceError(f"|x| exceeded {bound:g} at step {i}")
        wealth[i + 1] = x
    tr = Trajectory(times, wealth, actions=actions, mean_actions=means, returns=returns)
    object.__setattr__(tr, "sampled_minus_mean", raw_dev)
    return tr


# ---------------------------------------------------------------- training

@dataclass
class LearningCurves:
    cost: list = field(default_factory=list)
    terminal_wealth: list = field(default_factory=list)
    w: list = field(default_factory=list)
    phi1_norm: list = field(default_factory=list)
    cov_norm: list = field(default_factory=list)

    def as_rows(self):
        return list(zip(range(len(self.cost)), self.cost, self.terminal_wealth, self.w, self.phi1_norm, self.cov_norm))


@dataclass
class LearnerState:
    theta: ValueParams
    phi: PolicyParams
    w: float
    episode: int = 0
    recent: list = field(default_factory=list)


def initial_state(config: EmvConfig, d: int) -> LearnerState:
    w = config.z if config.w0 is None else config.w0
    theta = ValueParams(theta3=config.init_theta3).with_terminal(w, config.z, config.T)
    phi = PolicyParams.initial(d, phi1=config.init_phi1, chol_scale=config.init_chol, phi3=config.init_theta3)
    return LearnerState(theta=theta, phi=phi, w=w)


def train_step(state: LearnerState, config: EmvConfig, returns: np.ndarray, rng: np.random.Generator):
    """One episode: rollout, critic/actor descent, periodic Lagrange update."""
    lam = config.lam_at(state.episode)
    T, w = config.T, state.w
    theta, phi = state.theta, state.phi
    traj = rollout(phi, returns, config.x0, w, lam, T, config.dt, rng, config.leverage, config.bound)
    g = gradients(theta, phi, [traj], lam, w, T)
    c = cost(theta, phi, [traj], lam, w, T)

    g3 = td_theta3_direction(theta, phi, traj, lam, w, T)
    if config.tie:
        g3_total = config.eta_theta3 * g3 + config.eta_phi * g.phi3
    else:
        g3_total = config.eta_theta3 * g3
    theta = ValueParams(
        theta1=theta.theta1 - config.eta_theta * g.theta[1],
        theta2=theta.theta2 - config.eta_theta * g.theta[2],
        theta3=max(theta.theta3 - g3_total, 0.0),
    ).with_terminal(w, config.z, T)

    diag = np.diag(phi.phi2_chol) - config.eta_phi * np.diag(g.phi2_chol)
    chol = np.tril(phi.phi2_chol, -1) + np.diag(np.maximum(diag, 1e-8))
    phi3 = phi.phi3 if config.tie else phi.phi3 - config.eta_phi * g.phi3
    phi1 = phi.phi1
    if config.mean_mode == "score":
        phi1 = phi1 - config.eta_phi1 * score_phi1_direction(phi, traj, lam, w, T, state.theta)
    phi = PolicyParams(phi1=phi1, phi2_chol=chol, phi3=phi3)
    if config.tie or config.mean_mode == "tie":
        phi = set_policy_mean_from_value(theta, phi, lam, mode=config.mean_mode)

    state.recent.append(traj.terminal)
    state.episode += 1
    if len(state.recent) >= config.N:
        w = update_lagrange(w, state.recent, config.alpha_w, config.z)
        state.recent = []
        theta = theta.with_terminal(w, config.z, T)
    state.theta, state.phi, state.w = theta, phi, w
    return c, traj.terminal


def episode_streams(seed, episode, tag=0):
    """Environment and action generators owned by one episode."""
    mk = lambda k: np.random.Generator(np.random.Philox(key=int(seed), counter=[0, int(tag), k, int(episode)]))
    return mk(1), mk(2)


def train(config: EmvConfig, env, seed: int = 0, state: LearnerState | None = None,
          progress_every: int | None = None, callback=None):
    """Run config.M episodes (from ``state`` if resuming).

    ``env`` must expose ``d`` and ``episode_returns(rng)``.  The action
    stream and the environment stream are separate Philox streams keyed by
    ``seed`` and the episode number, so resuming a checkpoint with the same
    seed continues the run exactly.
    """
    state = state or initial_state(config, env.d)
    curves = LearningCurves()
    start = state.episode
    while state.episode < start + config.M:
        lam = config.lam_at(state.episode)
        env_rng, act_rng = episode_streams(seed, state.episode)
        c, xT = train_step(state, config, env.episode_returns(env_rng), act_rng)
        curves.cost.append(c)
        curves.terminal_wealth.append(xT)
        curves.w.append(state.w)
        curves.phi1_norm.append(float(np.linalg.norm(state.phi.phi1)))
        cov = state.phi.covariance(0.0, config.lam_at(state.episode - 1), config.T)
        curves.cov_norm.append(float(np.linalg.norm(cov, 2)))
        if progress_every and state.episode % progress_every == 0:
            recent = curves.terminal_wealth[-progress_every:]
            msg = f"episode {state.episode} w={state.w:.4f} mean_xT={np.mean(recent):.4f} cost={c:.4g} lam={lam:.3g}"
            log.info(msg)
            if callback:
                callback(msg)
    return state, curves


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, state: LearnerState, config: EmvConfig, extra=None):
    """Flat ``key = value`` text; floats written with repr for exact round trip."""
    lines = [
        f"theta0 = {state.theta.theta0!r}",
        f"theta1 = {state.theta.theta1!r}",
        f"theta2 = {state.theta.theta2!r}",
        f"theta3 = {state.theta.theta3!r}",
        "phi1 = " + " ".join(repr(float(v)) for v in state.phi.phi1),
        "phi2_chol = " + " ".join(repr(float(v)) for v in state.phi.phi2_chol.ravel()),
        f"phi3 = {float(state.phi.phi3)!r}",
        f"w = {float(state.w)!r}",
        f"episode = {state.episode}",
        "recent = " + " ".join(repr(float(v)) for v in state.recent),
    ]
    for f in fields(config):
        lines.append(f"config.{f.name} = {getattr(config, f.name)!r}")
    for k, v in (extra or {}).items():
        lines.append(f"extra.{k} = {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _floats(text):
    return [float(v) for v in text.split()] if text.strip() else []


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: (LearnerState, EmvConfig, extra)."""
    kv = {}
    with open(path) as fh:
        for line in fh:
            if line.strip() and not line.lstrip().startswith("#"):
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
    phi1 = np.array(_floats(kv["phi1"]))
    d = phi1.size
    state = LearnerState(
        theta=ValueParams(*(float(kv[f"theta{i}"]) for i in range(4))),
        phi=PolicyParams(phi1=phi1, phi2_chol=np.array(_floats(kv["phi2_chol"])).reshape(d, d), phi3=float(kv["phi3"])),
        w=float(kv["w"]),
        episode=int(kv.get("episode", 0)),
        recent=_floats(kv.get("recent", "")),
    )
    cfg = {}
    for f in fields(EmvConfig):
        raw = kv.get(f"config.{f.name}")
        if raw is not None:
            cfg[f.name] = _literal(raw)
    extra = {k[6:]: v for k, v in kv.items() if k.startswith("extra.")}
    return state, EmvConfig(**cfg), extra


def _literal(raw):
    import ast

    return ast.literal_eval(raw)


def config_dict(config: EmvConfig):
    return asdict(config)
