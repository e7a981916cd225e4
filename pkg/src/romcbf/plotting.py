"""Optional PNG rendering of CLI outputs; needs the ``plot`` extra (matplotlib)."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.lines import Line2D  # noqa: E402


def plot_trajectory(traj, path, title=""):
    n = traj.states.shape[1]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for i in range(n):
        axes[0].plot(traj.times, traj.states[:, i], label=f"x_{i}")
    axes[0].legend(loc="best", fontsize="small")
    axes[0].set_ylabel("state")
    if len(traj.inputs):
        for j in range(traj.inputs.shape[1]):
            axes[1].plot(traj.times[:-1], traj.inputs[:, j], label=f"u_{j}")
        axes[1].legend(loc="best", fontsize="small")
    axes[1].set_ylabel("input")
    if traj.h_values is not None:
        axes[2].plot(traj.times, traj.h_values, label="h")
    if traj.h0_values is not None:
        axes[2].plot(traj.times, traj.h0_values, label="h0")
    axes[2].axhline(0.0, color="k", lw=0.8)
    axes[2].legend(loc="best", fontsize="small")
    axes[2].set_xlabel("t [s]")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_validity(report, path, title=""):
    X = report.states
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(X[:, 0], X[:, 1], s=2, c="0.8")
    band = report.band_mask
    ax.scatter(X[band, 0], X[band, 1], s=4, c=report.margin[band], cmap="viridis")
    viol = report.violation_mask
    ax.scatter(X[viol, 0], X[viol, 1], s=16, c="r", marker="x", label="violation")
    ax.set_xlabel("x_0")
    ax.set_ylabel("x_1")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_levelset(csv_path, path, title="", keys=()):
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(6, 5))
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    handles = []
    for i, (label, grp) in enumerate(groups.items()):
        x = np.array([float(r["x"]) for r in grp])
        v = np.array([float(r["v"]) for r in grp])
        h = np.array([float(r["h"]) for r in grp])
        nx = len(np.unique(x))
        color = f"C{i % 10}"
        ax.contour(x.reshape(nx, -1), v.reshape(nx, -1), h.reshape(nx, -1), levels=[0.0], colors=[color])
        # contour sets have no legend handle, so use a proxy line
        handles.append(Line2D([], [], color=color, label=", ".join(f"{k}={val}" for k, val in zip(keys, label))))
    ax.set_xlabel("x")
    ax.set_ylabel("v")
    if keys:
        ax.legend(handles=handles, loc="best", fontsize="small")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
