"""Figure rendering for experiment outputs.

Uses the Agg backend so reports render identically on headless machines.
Every function writes one PNG next to the delimited output it illustrates.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ..manifolds import DataSet
from ..sampler import SampleBatch

_COLORS = {"IDM": "tab:blue", "Memorized": "tab:orange", "EarlyStopped": "tab:green"}


def _method_series(summary: dict) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    series = {}
    for method, by_coord in summary["w1_means"].items():
        coords = sorted(int(k) for k in by_coord)
        vals = np.array([by_coord[str(c)] for c in coords])
        series[method] = (np.array(coords, dtype=float), vals)
    return series


def rate_figure(summary: dict, intrinsic_dim: int, path: str | Path) -> Path:
    """Log-log W1 versus n with reference slopes -2/(d+4) and -1/d."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    series = _method_series(summary)
    for method, (ns, vals) in sorted(series.items()):
        ax.loglog(
            ns,
            vals,
            marker="o",
            color=_COLORS.get(method),
            label=f"{method} (slope {summary['fits'][method]['slope']:+.3f})"
            if method in summary.get("fits", {})
            else method,
        )
    for method, ref_slope, style in (
        ("IDM", -2.0 / (intrinsic_dim + 4), "--"),
        ("Memorized", -1.0 / intrinsic_dim, ":"),
    ):
        if method in series:
            ns, vals = series[method]
            anchor = vals[0] * (ns / ns[0]) ** ref_slope
            ax.loglog(
                ns,
                anchor,
                style,
                color=_COLORS.get(method),
                alpha=0.6,
                label=f"reference slope {ref_slope:+.3f}",
            )
    ax.set_xlabel("training points n")
    ax.set_ylabel("W1 estimate")
    ax.set_title(f"Convergence against ground truth (d={intrinsic_dim})")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def dimension_figure(summary: dict, path: str | Path) -> Path:
    """W1 versus ambient dimension at fixed n; flat lines are the point."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    for method, (ds, vals) in sorted(_method_series(summary).items()):
        label = method
        flat = summary.get("flatness", {}).get(method)
        if flat is not None:
            label = f"{method} (spread {flat:.3f})"
        ax.plot(ds, vals, marker="o", color=_COLORS.get(method), label=label)
    ax.set_xscale("log", base=2)
    ax.set_ylim(bottom=0.0)
    ax.set_xlabel("ambient dimension D")
    ax.set_ylabel("W1 estimate")
    ax.set_title(f"Ambient-dimension sweep at n={summary['n']}")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def circle_demo_figure(
    data: DataSet, early: SampleBatch, updated: SampleBatch, path: str | Path
) -> Path:
    """Training circle, the noised cloud, and the cloud after the update."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.5), sharex=True, sharey=True)
    theta = np.linspace(0.0, 2.0 * np.pi, 400)
    ring = np.column_stack([np.cos(theta), np.sin(theta)])
    for ax, cloud, title, color in (
        (axes[0], early.samples, "early stopped", "tab:green"),
        (axes[1], updated.samples, "after inertia update", "tab:blue"),
    ):
        ax.plot(ring[:, 0], ring[:, 1], color="0.8", lw=1.0, zorder=0)
        ax.scatter(
            data.points[:, 0], data.points[:, 1], s=18, color="k", marker="x",
            label="training", zorder=2,
        )
        ax.scatter(cloud[:, 0], cloud[:, 1], s=10, color=color, alpha=0.7, zorder=1)
        ax.set_title(title)
        ax.set_aspect("equal")
    axes[0].legend(fontsize=8, loc="upper right")
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def score_field_figure(
    xs: np.ndarray,
    ys: np.ndarray,
    scores: np.ndarray,
    data: DataSet,
    path: str | Path,
) -> Path:
    """Quiver of the empirical score over the plane, circle data overlaid.

    Arrows are normalized to unit length and colored by log magnitude, since
    raw magnitudes span orders of magnitude across the plane.
    """
    gx, gy = np.meshgrid(xs, ys)
    sx = scores[:, 0].reshape(len(ys), len(xs))
    sy = scores[:, 1].reshape(len(ys), len(xs))
    mag = np.hypot(sx, sy)
    safe = np.where(mag > 0, mag, 1.0)
    fig, ax = plt.subplots(figsize=(6.0, 5.2))
    q = ax.quiver(
        gx, gy, sx / safe, sy / safe, np.log10(np.maximum(mag, 1e-12)),
        cmap="viridis", scale=40, width=0.003,
    )
    fig.colorbar(q, ax=ax, label="log10 |score|")
    ax.scatter(data.points[:, 0], data.points[:, 1], s=14, color="r", marker="x")
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("Empirical score field")
    path = Path(path)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path
