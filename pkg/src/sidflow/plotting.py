"""Static figures for sweep and trace reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _num(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return np.nan


def plot_sweep(rows: list[dict], axis: str, metrics: list[str], path) -> Path:
    """One panel per metric: per-repetition points plus the mean over repetitions."""
    path = Path(path)
    metrics = [m for m in metrics if any(np.isfinite(_num(r.get(m))) for r in rows)] or metrics[:1]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2), squeeze=False)
    xs = np.array([_num(r[axis]) for r in rows])
    for ax, m in zip(axes[0], metrics):
        ys = np.array([_num(r.get(m)) for r in rows])
        ax.plot(xs, ys, "o", alpha=0.4, color="tab:blue")
        ux = np.unique(xs[np.isfinite(xs)])
        means = [np.nanmean(ys[xs == u]) if np.any(np.isfinite(ys[xs == u])) else np.nan
                 for u in ux]
        ax.plot(ux, means, "-", color="tab:blue")
        ax.set_xlabel(axis)
        ax.set_ylabel(m)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trace(rows: list[dict], path) -> Path:
    path = Path(path)
    it = np.array([_num(r["iteration"]) for r in rows])
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, key in zip(axes, ("loss_psi", "loss_theta", "proxy")):
        y = np.array([_num(r.get(key)) for r in rows])
        ok = np.isfinite(y)
        ax.plot(it[ok], y[ok], "-" if key != "proxy" else "o-", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_points(samples: np.ndarray, reference: np.ndarray, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(reference[:, 0], reference[:, 1], s=2, alpha=0.3, label="data")
    ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.3, label="samples")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", markerscale=4)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
