"""Metric emission: JSON, CSV, a readable table, and rendered figures.

CSV carries one row per (variant, family) at full precision; results.md
prints rates to one decimal. Figures (success-rate bars per family and
variant; loss curves for training runs) are rendered headlessly to PNG
next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

__all__ = ["emit_report", "plot_loss_curve"]

log = logging.getLogger(__name__)


def emit_report(reports, out_dir) -> dict:
    """Write metrics.json / metrics.csv / results.md / ablation.png.

    Returns the mapping of artifact name to path.
    """
    if not reports:
        raise ValueError("emit_report: no reports")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "metrics.json",
        "csv": out_dir / "metrics.csv",
        "md": out_dir / "results.md",
        "figure": out_dir / "ablation.png",
    }

    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(paths["csv"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "family", "n", "success_rate", "mean_len", "mean_subgoals"])
        for r in reports:
            for family, s in r.families.items():
                writer.writerow([r.variant, family, s.n_rollouts,
                                 repr(s.success_rate), repr(s.mean_length),
                                 repr(s.mean_subgoals)])

    families = list(reports[0].families)
    lines = ["# Ablation results", ""]
    lines.append("| variant | " + " | ".join(families) + " | average |")
    lines.append("|---" * (len(families) + 2) + "|")
    for r in reports:
        cells = [f"{100 * r.families[f].success_rate:.1f}%" for f in families]
        lines.append(f"| {r.variant} | " + " | ".join(cells)
                     + f" | {100 * r.average_success:.1f}% |")
    lines += ["", f"Rollouts per cell: {reports[0].families[families[0]].n_rollouts}; "
              f"seed {reports[0].seed}."]
    paths["md"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    _plot_success(reports, families, paths["figure"])
    log.info("report written under %s", out_dir)
    return paths


def _plot_success(reports, families, path) -> None:
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(families), 3.4))
    width = 0.8 / len(reports)
    xs = np.arange(len(families))
    for i, r in enumerate(reports):
        rates = [100 * r.families[f].success_rate for f in families]
        ax.bar(xs + (i - (len(reports) - 1) / 2) * width, rates, width, label=r.variant)
    ax.set_xticks(xs)
    ax.set_xticklabels(families, fontsize=8)
    ax.set_ylabel("success rate [%]")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_loss_curve(loss_csv, path=None) -> Path:
    """Render the training loss curve recorded in loss.csv."""
    loss_csv = Path(loss_csv)
    if path is None:
        path = loss_csv.with_name("loss_curve.png")
    steps, losses = [], []
    with open(loss_csv, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            s, l, _ = line.split(",")
            steps.append(int(s))
            losses.append(float(l))
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.plot(steps, losses, lw=0.7)
    if len(losses) > 50:
        k = np.ones(50) / 50
        ax.plot(steps[49:], np.convolve(losses, k, "valid"), lw=1.6)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return Path(path)
