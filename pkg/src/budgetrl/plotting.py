"""Training-dynamics figures rendered from metrics rows.

Figures go to files only (Agg backend); SVG output is made reproducible by
pinning the hash salt and dropping the timestamp.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PANELS = (
    ("response_len_mean", "Response length"),
    ("grad_norm", "Gradient norm"),
    ("reward_mean", "Reward"),
    ("simulated_throughput", "Throughput (tokens / sim. time)"),
    ("tokens_selected", "Tokens trained"),
    ("entropy_mean", "Policy entropy"),
)

STYLE = {
    "svg.hashsalt": "budgetrl",
    "font.size": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def plot_dynamics(runs: Mapping[str, Sequence[dict]], path: str | Path,
                  panels: Sequence[tuple[str, str]] = PANELS) -> Path:
    """One panel per metric, one line per labelled run."""
    with plt.rc_context(STYLE):
        ncols = 2
        nrows = (len(panels) + 1) // ncols
        fig, axes = plt.subplots(nrows, ncols, figsize=(7.5, 2.2 * nrows), sharex=True)
        for ax, (column, title) in zip(axes.flat, panels):
            for label, rows in runs.items():
                ax.plot([r["step"] for r in rows], [r[column] for r in rows], lw=0.9, label=label)
            ax.set_title(title)
        for ax in axes.flat[len(panels):]:
            ax.set_visible(False)
        for ax in axes[-1]:
            ax.set_xlabel("step")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_domain_rewards(table: Sequence[dict], path: str | Path) -> Path:
    """Grouped bars of final reward per domain for each stage plan."""
    plans = sorted({r["plan"] for r in table})
    domains = sorted({r["domain"] for r in table})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(plans), 1)
        for j, plan in enumerate(plans):
            means = []
            for d in domains:
                vals = [r["reward"] for r in table if r["plan"] == plan and r["domain"] == d]
                means.append(sum(vals) / len(vals) if vals else 0.0)
            ax.bar([i + j * width for i in range(len(domains))], means, width, label=plan)
        ax.set_xticks([i + width * (len(plans) - 1) / 2 for i in range(len(domains))], domains)
        ax.set_ylabel("final reward")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))
