"""Command-line entry point: ``emv {simulate,train,backtest,verify,report}``.

Exit codes: 0 success, 1 runtime error, 2 configuration error, 3 training
divergence.  ``verify`` exits with the number of failed checks (capped).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as C
from .errors import ConfigError, DegenerateMarketError, DivergenceError, EMVError, InputError

log = logging.getLogger("emv")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 1, 2, 3
MAX_VERIFY_EXIT = 100

HELP = {
    "simulate": "simulate GBM prices and exploratory wealth paths",
    "train": "train the EMV learner on a simulated or historical environment",
    "backtest": "backtest EMV, plug-in Markowitz or zero policies on a price table",
    "verify": "run the analytic self-checks; exit code = number of failures",
    "report": "render figures from the files of a previous run",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="emv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in C.SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", default=None, help="flat key = value file")
        for key, (kind, default) in schema.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, metavar=kind.upper(),
                           help=f"{kind} (default {C.format_value(default)})")
    return parser


def _vec(s):
    return np.asarray(C._vector(s), dtype=float)


def market_from(cfg, allow_flat=False):
    """MarketParams from mu/sigma (or rho/sigma); None for sigma = 0 when allowed."""
    from .market_sim import MarketParams

    sigma = np.atleast_2d(np.asarray(cfg["sigma"], dtype=float))
    if sigma.shape[0] != sigma.shape[1]:
        raise ConfigError("sigma must be square")
    if allow_flat and not np.any(sigma):
        return None
    try:
        if cfg.get("rho") is not None:
            return MarketParams.from_rho(_vec(cfg["rho"]), sigma, cfg["r"])
        return MarketParams(np.asarray(cfg["mu"], dtype=float), sigma, cfg["r"])
    except (InputError, DegenerateMarketError) as exc:
        raise ConfigError(f"invalid market: {exc}") from None


def emv_config_from(cfg, T=None, dt=None):
    from .emv_learner import EmvConfig

    try:
        return EmvConfig(
            lam=cfg["lambda"], z=cfg["z"], T=T or cfg["T"], dt=dt or cfg["dt"], x0=cfg["x0"], M=cfg["episodes"],
            N=cfg["n_update"], eta_theta=cfg["eta_theta"], eta_theta3=cfg["eta_theta3"], eta_phi=cfg["eta_phi"],
            eta_phi1=cfg["eta_phi1"], alpha_w=cfg["alpha_w"], leverage=cfg["leverage"], mean_mode=cfg["mean_mode"],
            tie=cfg["tie"], init_chol=cfg["init_chol"], lam_final=cfg["lambda_final"])
    except InputError as exc:
        raise ConfigError(str(exc)) from None


def write_tsv(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg):
    from .closed_form import ProblemSpec, lagrange_w
    from .checks import _ClassicalPolicy, _OptimalPolicy
    from .market_sim import PathGrid, simulate_exploratory_wealth, simulate_price_paths

    out = cfg["out"]
    n = int(round(cfg["T"] / cfg["dt"]))
    grid = PathGrid.uniform(cfg["T"], n)
    market = market_from(cfg, allow_flat=True)
    n_save = min(cfg["save_paths"], cfg["n_paths"])
    if market is None:
        mu = np.asarray(cfg["mu"], dtype=float)
        prices = cfg["s0"] * np.exp(np.outer(grid.times, mu))
        write_tsv(os.path.join(out, "prices.tsv"), ["t"] + [f"S{j}" for j in range(mu.size)],
                  [[t, *row] for t, row in zip(grid.times, prices)])
        print("sigma = 0: deterministic prices written; wealth simulation skipped")
        return EXIT_OK
    if cfg["mode"] not in ("aggregate", "sampled"):
        raise ConfigError("mode must be aggregate or sampled")
    prices = simulate_price_paths(market, np.full(market.d, cfg["s0"]), grid, max(n_save, 1), cfg["seed"],
                                  threads=cfg["threads"])
    write_tsv(os.path.join(out, "prices.tsv"), ["t"] + [f"S{j}" for j in range(market.d)],
              [[t, *row] for t, row in zip(grid.times, prices[0])])
    spec = ProblemSpec(cfg["T"], cfg["z"], cfg["x0"], cfg["lambda"], market)
    w = lagrange_w(spec)
    policy = _OptimalPolicy(spec) if spec.lam > 0 else _ClassicalPolicy(spec)
    mode = cfg["mode"] if spec.lam > 0 else "aggregate"
    path = simulate_exploratory_wealth(policy, market, grid, cfg["x0"], w, cfg["seed"] + 1, n_paths=cfg["n_paths"],
                                       mode=mode, threads=cfg["threads"])
    write_tsv(os.path.join(out, "wealth_paths.tsv"), ["t"] + [f"path{k}" for k in range(n_save)],
              [[t, *path.wealth[:n_save, i]] for i, t in enumerate(grid.times)])
    xt = path.terminal
    se = xt.std(ddof=1) / math.sqrt(xt.size) if xt.size > 1 else float("nan")
    stats = [("n_paths", xt.size), ("w", w), ("mean_terminal", float(xt.mean())), ("std_terminal", float(xt.std(ddof=1)) if xt.size > 1 else 0.0),
             ("stderr_mean", se), ("z", cfg["z"])]
    write_tsv(os.path.join(out, "summary.tsv"), ["stat", "value"], stats)
    for k, v in stats:
        print(f"{k}\t{_fmt(v)}")
    return EXIT_OK


def _write_curve(path, curves, offset=0):
    write_tsv(path, ["episode", "cost", "terminal_wealth", "w", "phi1_norm", "cov_norm"],
              [(offset + i, *row[1:]) for i, row in enumerate(curves.as_rows())])


def _historical_inputs(cfg, need_test=False):
    from .backtest import PERIODS, load_prices, make_seeds, period_returns

    if cfg["prices"] is None:
        raise ConfigError("historical runs need --prices")
    if cfg["frequency"] not in PERIODS:
        raise ConfigError("frequency must be monthly or daily")
    table = load_prices(cfg["prices"])
    rng = np.random.default_rng(cfg["seed"])
    try:
        seeds = make_seeds(table, cfg["d"], cfg["n_seeds"], rng)
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    return table, seeds


def _split(cfg, n_rows):
    half = n_rows // 2
    tr = C._range(cfg["train_range"]) if cfg.get("train_range") else (0, half)
    te = C._range(cfg["test_range"]) if cfg.get("test_range") else (half, n_rows)
    return tr, te


def cmd_train(cfg):
    from .emv_learner import SimulatedEnv, load_checkpoint, save_checkpoint, train

    out = cfg["out"]
    progress = cfg["progress_every"] or None
    if cfg["env"] == "simulated":
        market = market_from(cfg)
        ecfg = emv_config_from(cfg)
        state = None
        if cfg["resume"]:
            state, _, _ = load_checkpoint(cfg["resume"])
            if state.phi.d != market.d:
                raise ConfigError("checkpoint dimension does not match the market")
        env = SimulatedEnv(market, ecfg.dt, ecfg.n_steps)
        offset = state.episode if state else 0
        state, curves = train(ecfg, env, seed=cfg["seed"], state=state, progress_every=progress, callback=print)
        save_checkpoint(os.path.join(out, "checkpoint.txt"), state, ecfg)
        _write_curve(os.path.join(out, "learning_curve.tsv"), curves, offset)
        print(f"phi1\t{' '.join(repr(float(v)) for v in state.phi.phi1)}")
        print(f"w\t{state.w!r}")
        return EXIT_OK
    if cfg["env"] not in ("batch", "universal"):
        raise ConfigError("env must be simulated, batch or universal")
    from .backtest import HistoricalEnv, PERIODS, period_returns

    table, seeds = _historical_inputs(cfg)
    dt = 1.0 / PERIODS[cfg["frequency"]]
    per = max(1, int(round(cfg["T"] / dt)))
    ecfg = emv_config_from(cfg, T=per * dt, dt=dt)
    a, b = C._range(cfg["train_range"]) if cfg["train_range"] else (0, table.prices.shape[0])
    rets = [period_returns(table.columns(s), 0.0 if cfg["r"] is None else cfg["r"], dt)[a:b - 1] for s in seeds]
    groups = [rets] if cfg["env"] == "universal" else [[R] for R in rets]
    for k, group in enumerate(groups):
        try:
            env = HistoricalEnv(group, per)
        except InputError as exc:
            raise ConfigError(str(exc)) from None
        state, curves = train(ecfg, env, seed=cfg["seed"] + k, progress_every=progress, callback=print)
        tag = "" if cfg["env"] == "universal" else f"_seed{k}"
        save_checkpoint(os.path.join(out, f"checkpoint{tag}.txt"), state, ecfg,
                        extra={"tickers": " ".join(seeds[k]) if tag else ";".join(" ".join(s) for s in seeds)})
        _write_curve(os.path.join(out, f"learning_curve{tag}.tsv"), curves)
    return EXIT_OK


def cmd_backtest(cfg):
    from .backtest import BacktestConfig, PERIODS, load_prices, make_seeds, run_backtest, synthetic_table, write_prices
    from .emv_learner import load_checkpoint

    out = cfg["out"]
    if cfg["frequency"] not in PERIODS:
        raise ConfigError("frequency must be monthly or daily")
    dt = 1.0 / PERIODS[cfg["frequency"]]
    if cfg["prices"]:
        table = load_prices(cfg["prices"])
    else:
        market = market_from(cfg)
        table = synthetic_table(market, cfg["synthetic_rows"], dt, cfg["seed"], frequency=cfg["frequency"])
        write_prices(os.path.join(out, "synthetic_prices.csv"), table)
    if cfg["policy"] not in ("emv", "markowitz", "zero"):
        raise ConfigError("policy must be emv, markowitz or zero")
    tr, te = _split(cfg, table.prices.shape[0])
    try:
        bcfg = BacktestConfig(d=cfg["d"], frequency=cfg["frequency"], T=cfg["T"], z=cfg["z"], x0=cfg["x0"],
                              leverage=cfg["leverage"], train_range=tr, test_range=te, mode=cfg["mode"],
                              n_seeds=cfg["n_seeds"], r=cfg["r"], window=cfg["window"] or None)
        seeds = make_seeds(table, cfg["d"], cfg["n_seeds"], np.random.default_rng(cfg["seed"]))
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    state = None
    if cfg["checkpoint"]:
        state, _, _ = load_checkpoint(cfg["checkpoint"])
    ecfg = emv_config_from(cfg, dt=dt)
    results, agg, _ = run_backtest(bcfg, table, cfg["policy"], seeds, emv_config=ecfg, seed=cfg["seed"],
                                   threads=cfg["threads"], state=state)
    write_tsv(os.path.join(out, "metrics.tsv"), ["seed", "annualized_return", "sharpe", "terminal_wealth", "max_gross"],
              [(r.seed, r.metrics["annualized_return"], r.metrics["sharpe"], r.metrics["terminal_wealth"],
                float(np.max(r.gross, initial=0.0))) for r in results])
    write_tsv(os.path.join(out, "aggregate.tsv"), ["stat", "value"], list(agg.items()))
    for r in results:
        write_tsv(os.path.join(out, f"wealth_seed{r.seed:03d}.tsv"), ["period", "wealth", "gross"],
                  [(i, x, r.gross[i] if i < r.gross.size else 0.0) for i, x in enumerate(r.wealth)])
    with open(os.path.join(out, "seeds.tsv"), "w") as fh:
        fh.write("seed\ttickers\n")
        for k, s in enumerate(seeds):
            fh.write(f"{k}\t{' '.join(s)}\n")
    for k, v in agg.items():
        print(f"{k}\t{_fmt(v)}")
    print("# sharpe: mean periodic excess return / sample std (n-1) * sqrt(periods per year); nan = undefined")
    return EXIT_OK


def cmd_verify(cfg):
    from .checks import run_all
    from .closed_form import ProblemSpec

    market = market_from(cfg)
    try:
        spec = ProblemSpec(cfg["T"], cfg["z"], cfg["x0"], cfg["lambda"], market)
    except InputError as exc:
        raise ConfigError(str(exc)) from None
    results = run_all(spec, seed=cfg["seed"], n_paths=cfg["n_paths"], tol=cfg["tol"], grid=cfg["grid"], h=cfg["h"],
                      sign=cfg["value_sign"], threads=cfg["threads"])
    with open(os.path.join(cfg["out"], "verify.tsv"), "w") as fh:
        for r in results:
            print(r.line())
            fh.write(r.line() + "\n")
    failures = sum(r.status == "FAIL" for r in results)
    return min(failures, MAX_VERIFY_EXIT)


def cmd_report(cfg):
    from .report import render

    if not os.path.isdir(cfg["input"]):
        raise ConfigError(f"no such directory {cfg['input']!r}")
    written = render(cfg["input"], cfg["format"])
    for p in written:
        print(p)
    if not written:
        print("nothing to plot")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "backtest": cmd_backtest, "verify": cmd_verify,
            "report": cmd_report}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        file_values = C.read_kv(args.config) if args.config else {}
        cfg = C.resolve(args.command, file_values, flags)
        if cfg["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        os.makedirs(cfg["out"], exist_ok=True)
        C.write_kv(os.path.join(cfg["out"], f"effective_{args.command}.cfg"), cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (EMVError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
