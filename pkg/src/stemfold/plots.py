"""SVG figures: error-vs-step lines, sweep trends, attention heatmaps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_mse_curves(curves: dict[str, list[float]], path: str | Path,
                    title: str = "forecast error vs step") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in curves.items():
        ax.plot(range(1, len(ys) + 1), ys, marker="o", markersize=3,
                label=label)
    ax.set_xlabel("forecast step")
    ax.set_ylabel("MSE")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_trend(xs: list[float], ys: list[float], path: str | Path,
               xlabel: str, ylabel: str = "MSE",
               title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="s")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_attention_map(matrix, path: str | Path,
                       title: str = "temporal context attention") -> None:
    fig, ax = plt.subplots(figsize=(6, 2.5))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis_r", vmin=0.0,
                   vmax=1.0, interpolation="nearest")
    ax.set_xlabel("timestep")
    ax.set_ylabel("agent")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.03)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
