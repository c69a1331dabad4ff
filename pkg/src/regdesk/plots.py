"""Static SVG figures. Output is byte-stable: fixed hash salt, no date metadata."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "regdesk",
    "svg.fonttype": "path",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.figsize": (6.0, 3.8),
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def loss_curves(rows: dict[str, list[float]], steps: list[int], path, title="training losses") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, ys in rows.items():
            ax.plot(steps, ys, lw=1.2, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def scatter_by_label(points: np.ndarray, labels: np.ndarray, path, title="samples (first two latent coords)") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.8))
        cmap = plt.get_cmap("tab10")
        for lab in np.unique(labels):
            sel = labels == lab
            ax.scatter(points[sel, 0], points[sel, 1], s=6, color=cmap(int(lab) % 10), label=str(lab), alpha=0.7, lw=0)
        ax.set_xlabel("z[0]")
        ax.set_ylabel("z[1]")
        ax.set_title(title)
        ax.legend(frameon=False, fontsize=7, markerscale=2, title="label")
        fig.tight_layout()
        return _save(fig, path)


def line(xs, ys, path, xlabel: str, ylabel: str, title: str, mark_x=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(xs, ys, marker="o", lw=1.5)
        if mark_x is not None:
            ax.axvline(mark_x, color="0.5", ls="--", lw=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def bars(names: list[str], values: list[float], path, ylabel: str, title: str) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.8))
        ax.bar(range(len(names)), values, color="#4c72b0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
