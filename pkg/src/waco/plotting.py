"""PNG figures for the analysis and sweep reports (non-interactive backend)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_matrix(path: str | Path, matrix: np.ndarray, row_labels: Optional[Sequence[str]] = None,
                col_labels: Optional[Sequence[str]] = None, title: str = "", xlabel: str = "",
                ylabel: str = "") -> None:
    """Cosine-similarity heatmap on a fixed [-1, 1] colour scale."""
    h, w = matrix.shape
    fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * w + 1.5), max(2.5, 0.35 * h + 1.0)))
    im = ax.imshow(matrix, cmap="RdBu_r", vmin=-1, vmax=1, aspect="auto", interpolation="nearest")
    if row_labels is not None:
        ax.set_yticks(range(h), labels=row_labels, fontsize=7)
    if col_labels is not None:
        ax.set_xticks(range(w), labels=col_labels, fontsize=7, rotation=90)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(path: str | Path, rows: Sequence[dict]) -> None:
    """BLEU against ST budget per method, and BLEU against word-level similarity."""
    by_method = defaultdict(list)
    for r in rows:
        by_method[(r["method"], r["asr_budget"])].append(r)
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    for (method, asr), cells in sorted(by_method.items(), key=lambda kv: str(kv[0])):
        cells = sorted(cells, key=lambda r: r["st_budget"])
        label = f"{method} (asr={asr})"
        left.plot([c["st_budget"] for c in cells], [c["bleu"] for c in cells], marker="o", label=label)
        right.scatter([c["word_sim"] for c in cells], [c["bleu"] for c in cells], label=label)
    left.set_xscale("log")
    left.set_xlabel("ST utterances")
    left.set_ylabel("BLEU")
    right.set_xlabel("word-level cosine similarity")
    right.set_ylabel("BLEU")
    left.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
