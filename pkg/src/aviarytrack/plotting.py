"""Report figures. Rendered with the Agg backend so output files are reproducible."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .wild import BUCKETS  # noqa: E402

# no timestamps or version strings in the file
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_eval_report(reports: Sequence, path) -> Path:
    """Grouped bars of AC per length bucket, one panel per report (greedy, oracle)."""
    fig, axes = plt.subplots(1, len(reports), figsize=(5 * len(reports), 3.8), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        table = rep.table()
        th = rep.thresholds
        width = 0.8 / len(th)
        x = np.arange(len(BUCKETS))
        for k, t in enumerate(th):
            vals = [table[b]["ac"][k] for b in BUCKETS]
            vals = [0.0 if np.isnan(v) else v for v in vals]
            ax.bar(x + (k - (len(th) - 1) / 2) * width, vals, width, label=f"{t:g} m")
        ax.set_xticks(x)
        ax.set_xticklabels([f"{b}\n(n={table[b]['segment_count']})" for b in BUCKETS])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("fraction within threshold")
        ax.set_title(rep.mode)
        ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    return _save(fig, path)


def plot_pairwise(matrices: dict, labels: Sequence[str], path) -> Path:
    kinds = list(matrices)
    fig, axes = plt.subplots(1, len(kinds), figsize=(4 * len(kinds), 4), squeeze=False)
    for ax, k in zip(axes[0], kinds):
        M = matrices[k]
        im = ax.imshow(M, cmap="viridis")
        ax.set_title(k)
        ax.set_xticks(range(len(labels)))
        ax.set_yticks(range(len(labels)))
        ax.set_xticklabels(labels, fontsize=6, rotation=90)
        ax.set_yticklabels(labels, fontsize=6)
        ax.set_xlabel("target")
        ax.set_ylabel("actor")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)


def plot_transitions(bonded, nonbonded, difference: np.ndarray, path) -> Path:
    states = list(bonded.states)
    panels = [("pair-bonded", bonded.probabilities, "viridis", (0, 1)),
              ("not pair-bonded", nonbonded.probabilities, "viridis", (0, 1)),
              ("difference", difference, "coolwarm", (-1, 1))]
    fig, axes = plt.subplots(1, 3, figsize=(14, 4.6))
    for ax, (title, M, cmap, lim) in zip(axes, panels):
        im = ax.imshow(M, cmap=cmap, vmin=lim[0], vmax=lim[1])
        ax.set_title(title)
        ax.set_xticks(range(len(states)))
        ax.set_yticks(range(len(states)))
        ax.set_xticklabels(states, fontsize=7, rotation=90)
        ax.set_yticklabels(states, fontsize=7)
        ax.set_xlabel("next")
        ax.set_ylabel("previous")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save(fig, path)
