"""Static figures from the delimited files written by the other commands."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_table(path, delimiter="\t"):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and not r[0].startswith("#")]
    if not rows:
        return [], np.empty((0, 0))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, data


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_learning_curve(path, out_path):
    header, data = read_table(path)
    col = {h: i for i, h in enumerate(header)}
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    ep = data[:, col["episode"]]
    axes[0].plot(ep, data[:, col["terminal_wealth"]], lw=0.3, alpha=0.5)
    k = max(1, len(ep) // 50)
    if len(ep) >= k:
        smooth = np.convolve(data[:, col["terminal_wealth"]], np.ones(k) / k, mode="valid")
        axes[0].plot(ep[k - 1:], smooth, color="k")
    axes[0].set_title("terminal wealth")
    axes[1].plot(ep, data[:, col["w"]])
    axes[1].set_title("w")
    axes[2].plot(ep, data[:, col["phi1_norm"]])
    axes[2].set_title("|phi1|")
    for ax in axes:
        ax.set_xlabel("episode")
    return _save(fig, out_path)


def plot_wealth_paths(paths, out_path, title="wealth"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        header, data = read_table(p)
        ax.plot(data[:, 0], data[:, 1], lw=0.6, alpha=0.6)
    ax.set_xlabel("period")
    ax.set_title(title)
    return _save(fig, out_path)


def plot_simulated(path, out_path):
    header, data = read_table(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j in range(1, data.shape[1]):
        ax.plot(data[:, 0], data[:, j], lw=0.5, alpha=0.5)
    ax.set_xlabel("t")
    ax.set_title("simulated wealth")
    return _save(fig, out_path)


def render(directory, fmt="png"):
    """Render every recognised file in ``directory``; returns written paths."""
    written = []
    names = sorted(os.listdir(directory))
    if "learning_curve.tsv" in names:
        written.append(plot_learning_curve(os.path.join(directory, "learning_curve.tsv"),
                                           os.path.join(directory, f"learning_curve.{fmt}")))
    if "wealth_paths.tsv" in names:
        written.append(plot_simulated(os.path.join(directory, "wealth_paths.tsv"),
                                      os.path.join(directory, f"wealth_paths.{fmt}")))
    dumps = [os.path.join(directory, n) for n in names if n.startswith("wealth_seed") and n.endswith(".tsv")]
    if dumps:
        written.append(plot_wealth_paths(dumps, os.path.join(directory, f"backtest_wealth.{fmt}"),
                                         "backtest wealth per seed"))
    return written
