"""Flat ``key = value`` configuration with schema validation.

Precedence is flags > file > defaults.  Keys mirror the long flag names with
dashes replaced by underscores.  Vectors are whitespace- or comma-separated;
matrices are row-major with rows separated by ``;``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def _float(s):
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan")
    return v


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none") else _float(s)


def _bool(s):
    t = str(s).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _vector(s):
    if isinstance(s, (list, tuple, np.ndarray)):
        return [float(v) for v in s]
    parts = str(s).replace(",", " ").split()
    if not parts:
        raise ValueError("empty vector")
    return [_float(p) for p in parts]


def _matrix(s):
    if isinstance(s, (list, tuple, np.ndarray)):
        return np.atleast_2d(np.asarray(s, dtype=float)).tolist()
    rows = [_vector(r) for r in str(s).split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows must have equal length")
    return rows


def _str(s):
    return str(s).strip()


def _opt_str(s):
    t = str(s).strip()
    return None if t.lower() in ("", "none") else t


def _range(s):
    v = [int(p) for p in str(s).replace(",", " ").replace(":", " ").split()]
    if len(v) != 2:
        raise ValueError("range needs two integers")
    return tuple(v)


PARSERS = {"float": _float, "int": int, "bool": _bool, "vector": _vector, "matrix": _matrix, "str": _str,
           "opt_float": _opt_float, "opt_str": _opt_str, "range": _range}

COMMON = {
    "seed": ("int", 0),
    "out": ("str", "out"),
    "threads": ("int", 1),
}

MARKET = {
    "mu": ("vector", [0.08]),
    "sigma": ("matrix", [[0.2]]),
    "rho": ("opt_str", None),
    "r": ("float", 0.0),
}

PROBLEM = {
    "T": ("float", 1.0),
    "z": ("float", 1.4),
    "x0": ("float", 1.0),
    "lambda": ("float", 0.1),
}

LEARNER = {
    "dt": ("float", 1 / 252),
    "episodes": ("int", 20000),
    "n_update": ("int", 10),
    "eta_theta": ("float", 5e-3),
    "eta_theta3": ("float", 1e-6),
    "eta_phi": ("float", 5e-4),
    "eta_phi1": ("float", 5e-4),
    "alpha_w": ("float", 0.05),
    "leverage": ("opt_float", None),
    "mean_mode": ("str", "score"),
    "tie": ("bool", True),
    "init_chol": ("float", 1.0),
    "lambda_final": ("opt_float", None),
    "progress_every": ("int", 1000),
}

SCHEMAS = {
    "simulate": {**COMMON, **MARKET, "T": ("float", 1.0), "dt": ("float", 1 / 252), "n_paths": ("int", 1000),
                 "s0": ("float", 100.0), "x0": ("float", 1.0), "z": ("float", 1.4), "lambda": ("float", 0.1),
                 "mode": ("str", "aggregate"), "save_paths": ("int", 100)},
    "train": {**COMMON, **MARKET, **PROBLEM, **LEARNER, "env": ("str", "simulated"), "prices": ("opt_str", None),
              "d": ("int", 1), "n_seeds": ("int", 1), "train_range": ("opt_str", None),
              "frequency": ("str", "monthly"), "resume": ("opt_str", None)},
    "backtest": {**COMMON, **MARKET, **PROBLEM, **LEARNER, "prices": ("opt_str", None), "d": ("int", 1),
                 "n_seeds": ("int", 100), "frequency": ("str", "monthly"), "train_range": ("opt_str", None),
                 "test_range": ("opt_str", None), "mode": ("str", "batch"), "policy": ("str", "emv"),
                 "checkpoint": ("opt_str", None), "window": ("int", 0), "synthetic_rows": ("int", 240)},
    "verify": {**COMMON, **MARKET, **PROBLEM, "n_paths": ("int", 20000), "grid": ("int", 50), "h": ("float", 1e-4),
               "tol": ("float", 1e-6), "value_sign": ("float", 1.0)},
    "report": {**COMMON, "input": ("str", "out"), "format": ("str", "png")},
}


def read_kv(path) -> dict:
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, _, v = line.partition("=")
            k = k.strip().replace("-", "_")
            if k in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {k!r}")
            out[k] = v.strip()
    return out


def resolve(command, file_values=None, flag_values=None) -> dict:
    """Merge defaults, file and flags for ``command``; reject unknown keys."""
    schema = SCHEMAS[command]
    cfg = {k: default for k, (_, default) in schema.items()}
    for source in (file_values or {}, flag_values or {}):
        for k, v in source.items():
            key = k.replace("-", "_")
            if key not in schema:
                raise ConfigError(f"unknown key {k!r} for command {command!r}")
            if v is None:
                continue
            kind = schema[key][0]
            try:
                cfg[key] = PARSERS[kind](v) if isinstance(v, str) or kind in ("vector", "matrix") else v
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {v!r} ({exc})") from None
    return cfg


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return f"{v[0]} {v[1]}"
    if isinstance(v, list):
        if v and isinstance(v[0], list):
            return "; ".join(" ".join(repr(float(x)) for x in row) for row in v)
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def write_kv(path, cfg: dict, skip=("out",)):
    """Echo an effective config; re-reading it reproduces the same run."""
    with open(path, "w") as fh:
        for k in sorted(cfg):
            if k not in skip:
                fh.write(f"{k} = {format_value(cfg[k])}\n")
