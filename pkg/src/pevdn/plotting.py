"""Figure output for the experiment suite (files only, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .summary import Summary  # noqa: E402

_LABELS = {"IQL": "IQL", "VANILLA_VDN": "Vanilla VDN", "PEVDN_A": "PE-VDN A",
           "PEVDN_B": "PE-VDN B", "PEVDN_C": "PE-VDN C"}


def plot_curves(summary: Summary, path, metric: str = "win_rate", title: str | None = None):
    """Mean curve with a min/max band per mode, saved to ``path``."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for mode in summary.final:
        steps, mean, lo, hi = summary.curve(mode, metric)
        line, = ax.plot(steps, mean, label=_LABELS.get(mode, mode))
        ax.fill_between(steps, lo, hi, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("Total environment steps")
    ax.set_ylabel("Win rate" if metric == "win_rate" else "Mean return")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
