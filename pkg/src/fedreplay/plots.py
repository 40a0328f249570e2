"""Figure rendering for experiment reports and sweep summaries.

Consumes finished reports (or their CSV/JSON files) and writes PNG figures
next to them. Kept separate from report emission so the delimited outputs
stay byte-deterministic and figure styling can evolve freely.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .report import ExperimentReport


def plot_accuracy_curves(report: ExperimentReport, out_path: str | Path) -> Path:
    """Overall accuracy after each task plus per-task retention curves."""
    out = Path(out_path)
    n = len(report.per_task_overall)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(n)
    ax.plot(xs, report.per_task_overall, "k-o", lw=2, label="overall (cumulative test)")
    for tau in range(n):
        ys = [report.accuracy_matrix[(t, tau)] for t in range(tau, n)]
        ax.plot(np.arange(tau, n), ys, "--", alpha=0.6, label=f"task {tau} subset")
    ax.set_xlabel("evaluated after task")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(f"{report.scenario} seed {report.seed}: "
                 f"a_avg={report.a_avg:.3f}, a_last={report.a_last:.3f}")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_allocation_trace(report: ExperimentReport, out_path: str | Path) -> Path | None:
    """Stacked per-client exemplar quotas at each task boundary."""
    if not report.allocation_trace:
        return None
    out = Path(out_path)
    tasks = [ps.task for ps in report.allocation_trace]
    num_clients = len(report.allocation_trace[0].per_client)
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(tasks))
    width = 0.7
    for c in range(num_clients):
        heights = np.array([ps.per_client[c] for ps in report.allocation_trace], dtype=float)
        ax.bar(tasks, heights, width, bottom=bottom, label=f"client {c}")
        bottom += heights
    ax.set_xlabel("boundary after task")
    ax.set_ylabel("exemplar slots")
    ax.set_xticks(tasks)
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=8)
    ax.set_title(f"memory plan per boundary ({report.config_echo.get('allocation_mode', '?')})")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_run_figures(report: ExperimentReport, base_path: str | Path) -> list[Path]:
    """Render the standard per-run figures next to `<base_path>.json`."""
    base = Path(base_path)
    written = [plot_accuracy_curves(report, base.parent / (base.name + "_accuracy.png"))]
    alloc = plot_allocation_trace(report, base.parent / (base.name + "_allocation.png"))
    if alloc is not None:
        written.append(alloc)
    return written


def plot_sweep(
    key: str,
    rows: Sequence[Mapping[str, float]],
    out_path: str | Path,
) -> Path:
    """Mean a_avg / a_last against the swept value."""
    out = Path(out_path)
    values = [row["value"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(values, [r["mean_a_avg"] for r in rows],
                yerr=[r["std_a_avg"] for r in rows], marker="o", capsize=3, label="a_avg")
    ax.errorbar(values, [r["mean_a_last"] for r in rows],
                yerr=[r["std_a_last"] for r in rows], marker="s", capsize=3, label="a_last")
    ax.set_xlabel(key)
    ax.set_ylabel("accuracy")
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(f"sweep over {key}")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_mode_comparison(
    per_seed: Mapping[int, Mapping[str, float]], out_path: str | Path
) -> Path:
    """Paired per-seed bars of final accuracy for dynamic vs fixed allocation."""
    out = Path(out_path)
    seeds = sorted(per_seed)
    xs = np.arange(len(seeds))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(xs - width / 2, [per_seed[s]["dynamic"] for s in seeds], width, label="dynamic")
    ax.bar(xs + width / 2, [per_seed[s]["fixed_equal"] for s in seeds], width, label="fixed_equal")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("a_last")
    ax.grid(alpha=0.3, axis="y")
    ax.legend()
    ax.set_title("dynamic vs fixed allocation")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
