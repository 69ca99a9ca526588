"""Report figures rendered headlessly from run and campaign results."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .output import ProbeTraces


def probe_figure(traces: ProbeTraces, path) -> None:
    """Cooling curves of every probe."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for j, name in enumerate(traces.names):
        ax.plot(traces.times, traces.values[:, j], label=name)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("temperature [K]")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def solidification_figure(times, solid_fraction_history, path) -> None:
    """Domain-average and extreme solid fraction against time."""
    hist = np.asarray(solid_fraction_history, dtype=float)
    times = np.asarray(times, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(times, hist.mean(axis=1), label="mean")
    ax.plot(times, hist.min(axis=1), label="min", ls="--")
    ax.plot(times, hist.max(axis=1), label="max", ls="--")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("solid fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def sobol_figure(table: dict, input_names, path) -> None:
    """Grouped bars of total Sobol indices per functional."""
    funcs = [f for f, (_, _, ok) in table.items() if ok]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    width = 0.8 / max(len(funcs), 1)
    x = np.arange(len(input_names), dtype=float)
    for i, f in enumerate(funcs):
        ax.bar(x + i * width, table[f][1], width, label=f)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(input_names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("total Sobol index")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def surface_figure(xv, yv, grid, xname, yname, title, path) -> None:
    """Filled contours of one response surface."""
    fig, ax = plt.subplots(figsize=(6, 4.8))
    cs = ax.contourf(xv, yv, np.asarray(grid).T, levels=21, cmap="viridis")
    fig.colorbar(cs, ax=ax)
    ax.set_xlabel(xname)
    ax.set_ylabel(yname)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
