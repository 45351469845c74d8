"""Historical harness: price ingestion, seed sets, rolling baseline, metrics.

Wealth is updated with discounted simple returns

    x' = x + sum_j u_j (S_j,i+1 / S_j,i e^{-r dt} - 1),

one row of the price table per period.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import date

import numpy as np

from .closed_form import ProblemSpec, classical_control, lagrange_w
from .emv_learner import (EmvConfig, LearnerState, PolicyParams, apply_leverage, episode_streams, initial_state,
                          train_step)
from .errors import DegenerateMarketError, IngestionError, InputError
from .market_sim import MarketParams

log = logging.getLogger(__name__)

PERIODS = {"monthly": 12, "daily": 252}
UNDEFINED = "nan"

__all__ = [
    "PriceTable", "BacktestConfig", "load_prices", "write_prices", "make_seeds", "historical_step",
    "apply_leverage", "markowitz_baseline", "run_backtest", "metrics", "SeedResult", "HistoricalEnv",
    "synthetic_table", "estimate_market", "plug_in_control", "period_returns", "aggregate",
]


@dataclass(frozen=True)
class PriceTable:
    dates: list
    tickers: list
    prices: np.ndarray
    dropped: tuple = ()

    def __post_init__(self):
        p = np.asarray(self.prices, dtype=float)
        if p.shape != (len(self.dates), len(self.tickers)):
            raise InputError("price matrix does not match dates x tickers")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise InputError("dates must be strictly increasing")
        if np.any(~np.isfinite(p)) or np.any(p <= 0):
            raise InputError("prices must be finite and positive")
        object.__setattr__(self, "prices", p)

    def columns(self, names):
        idx = [self.tickers.index(n) for n in names]
        return self.prices[:, idx]

    def slice_rows(self, start, stop):
        return PriceTable(self.dates[start:stop], list(self.tickers), self.prices[start:stop])


def load_prices(path) -> PriceTable:
    """Read comma-separated prices: header of tickers, first column ISO dates.

    Rows with an empty cell are dropped and logged.  Unparseable cells,
    nonpositive prices and duplicate or out-of-order dates raise
    IngestionError carrying the 1-based line number.
    """
    dates, rows, dropped = [], [], []
    seen = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("empty price file", line=1) from None
        tickers = [h.strip() for h in header[1:]]
        if not tickers or len(set(tickers)) != len(tickers):
            raise IngestionError("header needs distinct ticker names", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(tickers) + 1:
                raise IngestionError(f"expected {len(tickers) + 1} fields, got {len(row)}", line=lineno)
            try:
                day = date.fromisoformat(row[0].strip())
            except ValueError:
                raise IngestionError(f"bad ISO date {row[0]!r}", line=lineno) from None
            if day in seen:
                raise IngestionError(f"duplicate date {day} (first on line {seen[day]})", line=lineno)
            seen[day] = lineno
            cells = [c.strip() for c in row[1:]]
            if any(c == "" for c in cells):
                dropped.append((lineno, day))
                log.warning("line %d: dropping %s (missing price)", lineno, day)
                continue
            try:
                vals = [float(c) for c in cells]
            except ValueError:
                raise IngestionError("unparseable price", line=lineno) from None
            if not all(math.isfinite(v) and v > 0 for v in vals):
                raise IngestionError("nonpositive or non-finite price", line=lineno)
            if dates and day < dates[-1]:
                raise IngestionError("dates out of order", line=lineno)
            dates.append(day)
            rows.append(vals)
    prices = np.array(rows, dtype=float).reshape(len(rows), len(tickers))
    return PriceTable(dates, tickers, prices, dropped=tuple(dropped))


def write_prices(path, table: PriceTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date"] + list(table.tickers))
        for day, row in zip(table.dates, table.prices):
            w.writerow([day.isoformat()] + [repr(float(v)) for v in row])


def make_seeds(table: PriceTable, d, n_seeds, rng: np.random.Generator):
    """n_seeds uniformly random d-subsets of the tickers, each in table order."""
    n = len(table.tickers)
    if d < 1 or d > n:
        raise InputError(f"need 1 <= d <= {n} tickers, got d={d}")
    if n_seeds < 1:
        raise InputError("n_seeds must be positive")
    return [[table.tickers[i] for i in sorted(rng.choice(n, size=d, replace=False))] for _ in range(n_seeds)]


def period_returns(prices, r, dt):
    prices = np.asarray(prices, dtype=float)
    return prices[1:] / prices[:-1] * math.exp(-r * dt) - 1.0


def historical_step(x, u, s_now, s_next, r, dt):
    s_now, s_next = np.asarray(s_now, dtype=float), np.asarray(s_next, dtype=float)
    if np.any(s_now <= 0) or np.any(s_next <= 0):
        raise InputError("prices must be positive")
    return float(x + np.dot(u, s_next / s_now * math.exp(-r * dt) - 1.0))


def estimate_market(returns, dt, r=0.0, ridge=True) -> MarketParams:
    """Plug-in GBM parameters from discounted simple returns of a window."""
    R = np.atleast_2d(np.asarray(returns, dtype=float))
    n, d = R.shape
    if n <= d:
        raise InputError(f"window of {n} returns is too short for d={d}")
    logs = np.log1p(R)
    cov = np.cov(logs, rowvar=False, ddof=1).reshape(d, d) / dt
    try:
        chol = np.linalg.cholesky(cov)
        if np.linalg.cond(cov) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        if not ridge:
            raise DegenerateMarketError("singular sample covariance") from None
        eps = 1e-6 * np.trace(cov) / d
        log.warning("singular sample covariance; ridge eps=%.3g", eps)
        chol = np.linalg.cholesky(cov + eps * np.eye(d))
    # excess drift of discounted prices; mu - r = mean simple excess return rate
    excess = R.mean(axis=0) / dt
    sigma = chol.T  # sigma' sigma = cov, columns are per-asset vectors
    return MarketParams(mu=excess + r, sigma=sigma, r=r)


def markowitz_baseline(window, x, z, T_remaining, r, dt, x_start=None) -> np.ndarray:
    """Plug-in classical control from a window of discounted returns.

    The multiplier is recomputed from the current wealth over the remaining
    horizon (rolling horizon); with true parameters this is exactly
    classical_control.
    """
    market = estimate_market(window, dt, r)
    return plug_in_control(market, x, z, T_remaining)


def plug_in_control(market: MarketParams, x, z, T_remaining):
    if T_remaining <= 0:
        return np.zeros(market.d)
    spec = ProblemSpec(T=T_remaining, z=z, x0=float(x), lam=0.0, market=market)
    try:
        w = lagrange_w(spec)
    except DegenerateMarketError:
        return np.zeros(market.d)
    return classical_control(0.0, float(x), w, spec)


@dataclass(frozen=True)
class BacktestConfig:
    d: int = 1
    frequency: str = "monthly"
    T: float = 1.0
    z: float = 1.4
    x0: float = 1.0
    leverage: float | None = None
    train_range: tuple = (0, 0)
    test_range: tuple = (0, 0)
    mode: str = "batch"
    n_seeds: int = 1
    r: float = 0.0
    window: int | None = None

    def __post_init__(self):
        if self.frequency not in PERIODS:
            raise InputError(f"frequency must be one of {sorted(PERIODS)}")
        if self.mode not in ("batch", "universal"):
            raise InputError("mode must be batch or universal")
        a, b = self.train_range
        c, e = self.test_range
        if not (0 <= a <= b <= c < e):
            raise InputError("train range must precede a non-empty, disjoint test range")
        if self.leverage is not None and not self.leverage > 0:
            raise InputError("leverage must be positive")

    @property
    def periods_per_year(self):
        return PERIODS[self.frequency]

    @property
    def dt(self):
        return 1.0 / self.periods_per_year


class HistoricalEnv:
    """Episodes of per-period returns from one or several seeds of a table.

    Each episode is the n_steps rows starting at a uniformly drawn offset in
    the training range (the whole range when it is exactly one horizon).
    With several seeds one is drawn per episode.
    """

    def __init__(self, returns_by_seed, n_steps):
        self.returns = [np.asarray(R, dtype=float) for R in returns_by_seed]
        self.n_steps = n_steps
        if any(R.shape[0] < n_steps for R in self.returns):
            raise InputError("training range shorter than one horizon")

    @property
    def d(self):
        return self.returns[0].shape[1]

    def episode_returns(self, rng):
        R = self.returns[int(rng.integers(len(self.returns)))] if len(self.returns) > 1 else self.returns[0]
        start = int(rng.integers(R.shape[0] - self.n_steps + 1))
        return R[start:start + self.n_steps]


@dataclass
class SeedResult:
    seed: int
    tickers: list
    wealth: np.ndarray
    gross: np.ndarray
    metrics: dict


def metrics(wealth, periods_per_year, r=0.0) -> dict:
    """Annualised return, Sharpe ratio and terminal wealth of one path.

    Sharpe uses periodic simple returns (excess over the per-period riskless
    return), sample std with n - 1, scaled by sqrt(periods_per_year); it is
    NaN (the undefined marker) when the std vanishes.
    """
    x = np.asarray(wealth, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InputError("wealth path needs at least two points")
    years = (x.size - 1) / periods_per_year
    ratio = x[-1] / x[0]
    ann = ratio ** (1.0 / years) - 1.0 if ratio > 0 else -1.0
    rets = x[1:] / x[:-1] - 1.0
    excess = rets - (math.exp(r / periods_per_year) - 1.0)
    sd = float(np.std(rets, ddof=1)) if rets.size > 1 else 0.0
    sharpe = float(np.mean(excess) / sd * math.sqrt(periods_per_year)) if sd > 1e-14 else float("nan")
    return {"annualized_return": float(ann), "sharpe": sharpe, "terminal_wealth": float(x[-1])}


def aggregate(results) -> dict:
    xt = np.array([res.metrics["terminal_wealth"] for res in results])
    return {
        "n_seeds": len(results),
        "mean_annualized_return": float(np.mean([res.metrics["annualized_return"] for res in results])),
        "mean_sharpe": float(np.nanmean([res.metrics["sharpe"] for res in results])) if any(
            np.isfinite(res.metrics["sharpe"]) for res in results) else float("nan"),
        "terminal_wealth_mean": float(xt.mean()),
        "terminal_wealth_var": float(xt.var(ddof=1)) if xt.size > 1 else 0.0,
        "max_gross_leverage": float(max(np.max(res.gross, initial=0.0) for res in results)),
    }


def _run_test(policy_fn, R, cfg: BacktestConfig):
    """Step a policy through test returns; the horizon restarts every T years."""
    n = R.shape[0]
    per = max(1, int(round(cfg.T * cfg.periods_per_year)))
    x = cfg.x0
    wealth = np.empty(n + 1)
    gross = np.zeros(n)
    wealth[0] = x
    for i in range(n):
        k = i % per
        u = np.asarray(policy_fn(i, k, x, per), dtype=float)
        if cfg.leverage is not None:
            u = apply_leverage(u, x, cfg.leverage)
        gross[i] = np.sum(np.abs(u)) / abs(x) if x != 0 else 0.0
        x = float(x + u @ R[i])
        wealth[i + 1] = x
    return wealth, gross


def emv_policy_fn(phi: PolicyParams, w):
    """Deterministic execution of a learned policy: its mean action."""
    return lambda i, k, x, per: -phi.phi1 * (x - w)


def run_backtest(cfg: BacktestConfig, table: PriceTable, source, seeds, emv_config: EmvConfig | None = None,
                 seed=0, threads=1, state: LearnerState | None = None):
    """Backtest every seed; returns (list[SeedResult], aggregate dict, trained states).

    ``source`` is ``"emv"``, ``"markowitz"`` or ``"zero"``.  For ``emv`` the
    learner trains on the train range (per seed in batch mode, once over all
    seeds in universal mode) unless ``state`` is supplied, then its mean
    action is executed on the test range.
    """
    if source not in ("emv", "markowitz", "zero"):
        raise InputError(f"unknown policy source {source!r}")
    if cfg.test_range[1] > table.prices.shape[0] - 1 + 1 or cfg.test_range[1] > table.prices.shape[0]:
        raise InputError("test range exceeds the price table")
    for s in seeds:
        if len(s) != cfg.d or any(t not in table.tickers for t in s):
            raise InputError(f"seed {s} inconsistent with d={cfg.d} or table tickers")
    if state is not None and state.phi.d != cfg.d:
        raise InputError("checkpoint dimension does not match d")

    rets = [period_returns(table.columns(s), cfg.r, cfg.dt) for s in seeds]
    a, b = cfg.train_range
    c, e = cfg.test_range
    per = max(1, int(round(cfg.T * cfg.periods_per_year)))
    ecfg = None
    if source == "emv":
        ecfg = emv_config or EmvConfig(T=cfg.T, dt=cfg.dt, z=cfg.z, x0=cfg.x0, leverage=cfg.leverage)
        ecfg = replace(ecfg, T=per * cfg.dt, dt=cfg.dt, leverage=cfg.leverage)

    def train_on(returns_list, key):
        env = HistoricalEnv([R[a:b - 1] if b - 1 > a else R[a:b] for R in returns_list], per)
        st = initial_state(ecfg, cfg.d)
        for ep in range(ecfg.M):
            env_rng, act_rng = episode_streams(seed, ep, tag=key + 1)
            train_step(st, ecfg, env.episode_returns(env_rng), act_rng)
        return st

    shared = state
    if source == "emv" and shared is None and cfg.mode == "universal":
        shared = train_on(rets, 0)

    def one(k):
        R = rets[k]
        test = R[c:e - 1] if e - 1 > c else R[c:e]
        st = None
        if source == "emv":
            st = shared if shared is not None else train_on([R], k + 1)
            fn = emv_policy_fn(st.phi, st.w)
        elif source == "markowitz":
            win = cfg.window or max(b - a - 1, cfg.d + 2)
            if win <= cfg.d:
                raise InputError("baseline window must exceed d")
            offset = c
            full = R

            def fn(i, kk, x, per_):
                hist = full[max(0, offset + i - win):offset + i]
                return markowitz_baseline(hist, x, cfg.z, (per_ - kk) * cfg.dt, cfg.r, cfg.dt)
        else:
            def fn(i, kk, x, per_):
                return np.zeros(cfg.d)
        wealth, gross = _run_test(fn, test, cfg)
        return SeedResult(seed=k, tickers=list(seeds[k]), wealth=wealth, gross=gross,
                          metrics=metrics(wealth, cfg.periods_per_year, cfg.r)), st

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, range(len(seeds))))
    else:
        out = [one(k) for k in range(len(seeds))]
    results = [o[0] for o in out]
    states = [o[1] for o in out]
    return results, aggregate(results), states


def synthetic_table(market: MarketParams, n_rows, dt, seed, s0=100.0, start=date(2000, 1, 1), tickers=None,
                    frequency="monthly"):
    """A price table generated by exact GBM stepping (for tests and demos)."""
    from .market_sim import PathGrid, path_generator, simulate_prices

    grid = PathGrid(0.0, dt, n_rows - 1)
    prices = simulate_prices(market, np.full(market.d, s0), grid, path_generator(seed, 0))
    days = []
    y, m = start.year, start.month
    for i in range(n_rows):
        if frequency == "monthly":
            days.append(date(y + (m - 1 + i) // 12, (m - 1 + i) % 12 + 1, 1))
        else:
            days.append(date.fromordinal(start.toordinal() + i))
    names = tickers or [f"S{j:03d}" for j in range(market.d)]
    return PriceTable(days, names, prices)
