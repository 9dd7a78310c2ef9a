"""File-only figures for evaluation output (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {"hybrid": ("C0", "o"), "physics": ("C1", "s"), "corrector": ("C2", "^")}


def plot_rmse_vs_lead(tables: dict, path, title="Rollout RMSE (normalised)") -> Path:
    """One line per variant with a +-1 std band; ``tables`` maps variant -> rows."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    for i, (name, rows) in enumerate(tables.items()):
        color, marker = _STYLE.get(name, (f"C{i + 3}", "d"))
        leads = [r["lead"] for r in rows]
        mean = [r["rmse_mean"] for r in rows]
        std = [r["rmse_std"] for r in rows]
        ax.plot(leads, mean, marker=marker, color=color, label=name, lw=1.5, ms=4)
        ax.fill_between(leads, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)],
                        color=color, alpha=0.15, lw=0)
    ax.set_xlabel("lead (steps)")
    ax.set_ylabel("RMSE")
    ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curve(records, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    ax.semilogy([r["step"] for r in records], [r["loss"] for r in records], lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("one-step loss")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
