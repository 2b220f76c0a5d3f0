"""Report figures: training loss curves and per-dialect TER bars."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.2),
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(reports: list[dict], path: str | Path) -> Path:
    """One line per training step, epoch loss on a log scale, epochs laid end to end."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        start = 0
        for rec in reports:
            losses = rec["epoch_loss"]
            xs = range(start + 1, start + len(losses) + 1)
            label = rec["stage"] if rec["step"] == 0 else f"{rec['stage']} {rec['step']}"
            ax.plot(list(xs), losses, marker="o", markersize=2.5, label=label)
            start += len(losses)
        ax.set_yscale("log")
        ax.set_xlabel("epoch (cumulative)")
        ax.set_ylabel("training loss")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_ter_bars(arms: dict[str, dict], path: str | Path) -> Path:
    """Grouped bars of mean TER per dialect; ``arms`` maps a label to an eval summary."""
    dialects = sorted({d for s in arms.values() for d in s["per_dialect"]}, key=int)
    width = 0.8 / max(len(arms), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, (label, summary) in enumerate(arms.items()):
            vals = [summary["per_dialect"].get(d, {}).get("mean_ter") or 0.0 for d in dialects]
            xs = [i + (k - (len(arms) - 1) / 2) * width for i in range(len(dialects))]
            ax.bar(xs, vals, width=width, label=f"{label} (mean {summary['mean_ter'] or 0:.3f})")
        ax.set_xticks(range(len(dialects)), [f"dialect {d}" for d in dialects])
        ax.set_ylabel("token error rate")
        ax.legend(fontsize=7)
        return _save(fig, path)
