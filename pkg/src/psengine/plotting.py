"""Figures for profiling sweeps and validation ledgers (written to files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(report, path) -> None:
    """FPS against batch size, log-scaled x axis."""
    rows = report.series or [report.to_dict()]
    xs = [r["num_envs"] for r in rows]
    ys = [r["fps"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("batch size (environments)")
    ax.set_ylabel("frames per second")
    ax.set_title(f"{report.game} level {report.level}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_ledger(ledger, path) -> None:
    counts = ledger.counts()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(counts)), list(counts.values()))
    ax.set_xticks(range(len(counts)))
    ax.set_xticklabels([k.replace("_", "\n") for k in counts], fontsize=8)
    ax.set_ylabel("levels")
    ax.set_title(f"validation ledger ({ledger.total} levels)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
