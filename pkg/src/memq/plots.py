"""Figures for evaluation runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes stable between identical runs
_PNG_META = {"Software": None}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(axis="y", alpha=0.3)


def plot_recall_curves(reports: Sequence, path: str | Path, reference: dict | None = None):
    """Recall@K against K, one line per retrieval setting.

    ``reference`` maps a label to {"R@1": .., ...} and is drawn dashed.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in reports:
        if not rep.recall_at_k:
            continue
        ks = sorted(rep.recall_at_k)
        ax.plot(ks, [rep.recall_at_k[k] for k in ks], marker="o", label=rep.setting.label)
    for name, row in (reference or {}).items():
        ks = sorted(int(key[2:]) for key in row if key.startswith("R@"))
        ax.plot(ks, [row[f"R@{k}"] for k in ks], ls="--", marker="x", alpha=0.7, label=f"{name} (published)")
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_ylim(0, 1.05)
    _style(ax)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_map_bars(reports: Sequence, path: str | Path, reference: dict[str, float] | None = None):
    """Anchor MAP per setting; published values (if given) as hollow markers."""
    labels = [rep.setting.label for rep in reports]
    values = [rep.map_score for rep in reports]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(labels) + 1), 3.5))
    x = range(len(labels))
    ax.bar(x, values, color="#4c72b0", width=0.6)
    if reference:
        ref_x = [i for i, lab in enumerate(labels) if lab in reference]
        ax.scatter(ref_x, [reference[labels[i]] for i in ref_x], marker="D", facecolors="none",
                   edgecolors="#c44e52", zorder=3, label="published")
        ax.legend(frameon=False, fontsize=8)
    for i, v in zip(x, values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("anchor MAP")
    ax.set_ylim(0, 1.1)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path
