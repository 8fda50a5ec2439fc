"""Static figures for reports. Uses the Agg canvas directly, no pyplot state."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

CLEAN_COLOR = "tab:blue"
PERTURBED_COLOR = "tab:red"

_AXIS_LABELS = {
    "jpeg": "JPEG quality",
    "noise": r"additive noise $\sigma$",
    "blur": r"blur $\sigma$ (5x5 kernel)",
}


def save_figure(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig).print_figure(str(path), dpi=120, bbox_inches="tight")
    return path


def robustness_figure(result, title: str | None = None) -> Figure:
    """Three stacked panels of DUQ vs severity; clean in blue, perturbed in red."""
    fig = Figure(figsize=(5, 9))
    ops = ("jpeg", "noise", "blur")
    for i, op in enumerate(ops):
        ax = fig.add_subplot(len(ops), 1, i + 1)
        for which, color in (("clean", CLEAN_COLOR), ("perturbed", PERTURBED_COLOR)):
            x, y = result.curve(op, which)
            if len(x):
                ax.plot(x, y, "o-", color=color, label=which)
        if op == "jpeg":
            ax.invert_xaxis()  # compression grows to the right
        ax.set_xlabel(_AXIS_LABELS[op])
        ax.set_ylabel("DUQ")
        ax.grid(alpha=0.3)
        if i == 0:
            ax.legend(loc="lower right", fontsize=8)
            if title:
                ax.set_title(title)
    fig.tight_layout()
    return fig


def duq_summary_figure(labels, clean, attacked) -> Figure:
    """Grouped bars of clean vs attacked DUQ per run."""
    fig = Figure(figsize=(max(4, 1.2 * len(labels) + 2), 3.5))
    ax = fig.add_subplot(111)
    x = np.arange(len(labels))
    ax.bar(x - 0.2, clean, width=0.4, color=CLEAN_COLOR, label="clean")
    ax.bar(x + 0.2, attacked, width=0.4, color=PERTURBED_COLOR, label="attacked")
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("DUQ")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def perturbation_figure(original, perturbed, gain: float = 20.0) -> Figure:
    """Original, perturbed and amplified difference side by side."""
    original = np.asarray(original, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    diff = np.clip(127.5 + gain * (perturbed - original), 0, 255)
    fig = Figure(figsize=(9, 3))
    for i, (img, name) in enumerate(((original, "original"), (perturbed, "perturbed"), (diff, f"difference x{gain:g}"))):
        ax = fig.add_subplot(1, 3, i + 1)
        ax.imshow(img.astype(np.uint8))
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return fig
