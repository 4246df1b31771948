"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _figure(width: float = 4.8, height: float = 3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_prune_curve(records: Sequence, path, baseline_accuracy: Optional[float] = None,
                     title: str = "") -> Path:
    """Best accuracy after each prune event against remaining capsules."""
    rows = sorted(records, key=lambda r: -r.n_remaining)
    fig, ax = _figure()
    with plt.rc_context(STYLE):
        ax.plot([r.n_remaining for r in rows], [100 * r.best_accuracy for r in rows], "o-", ms=3, lw=1.2,
                color="C0", label="after fine-tuning")
        if baseline_accuracy is not None:
            ax.axhline(100 * baseline_accuracy, color="0.4", ls="--", lw=0.8, label="baseline")
        ax.invert_xaxis()
        ax.set_ylim(top=min(ax.get_ylim()[1], 100.5))
        ax.set_xlabel("remaining primary capsules")
        ax.set_ylabel("best test accuracy (%)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
    return _save(fig, path)


def plot_bench(results: Sequence, path, title: str = "") -> Path:
    """Median inference time per survivor count, largest model first."""
    rows = sorted(results, key=lambda r: -r.n_pcs)
    fig, ax = _figure()
    with plt.rc_context(STYLE):
        xs = range(len(rows))
        ax.bar(xs, [r.median_s for r in rows], color="C1", width=0.6)
        ax.set_xticks(list(xs), [str(r.n_pcs) for r in rows])
        ax.set_xlabel("primary capsules")
        ax.set_ylabel("median inference time (s)")
        base = rows[0].median_s if rows else None
        for x, r in zip(xs, rows):
            ax.annotate(f"{base / r.median_s:.2f}x", (x, r.median_s), ha="center", va="bottom", fontsize=7)
        if title:
            ax.set_title(title)
    return _save(fig, path)
