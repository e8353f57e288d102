"""PNG plots for reports: precision-recall curves and training loss curves."""

from __future__ import annotations

import csv
import os
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from dave.errors import DatasetError  # noqa: E402
from dave.evaluation import APResult  # noqa: E402

CURVE_COLORS = ("#43b581", "#faa61a", "#7289da", "#f04747", "#99aab5")


def _prepare(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def plot_pr_curves(path: str, curves: Mapping[str, APResult]) -> str:
    """One line per named AP result; the legend carries the AP."""
    _prepare(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        for i, (name, res) in enumerate(curves.items()):
            recall = [0.0, *res.recall.tolist()]
            precision = [1.0 if len(res.precision) else 0.0, *res.precision.tolist()]
            ax.plot(recall, precision, color=CURVE_COLORS[i % len(CURVE_COLORS)], label=f"{name} (AP {res.ap:.3f})")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.05)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower left")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path


def read_loss_curve(path: str, column: str = "l_bic") -> List[float]:
    """Per-step values of ``column`` from a training loss CSV."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise DatasetError(f"loss curve not found: {path}") from None
    try:
        return [float(r[column]) for r in rows]
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{path}: bad loss column {column!r} ({e})") from None


def proposal_loss(path: str) -> List[float]:
    """L_bic + alpha * L_bbox per step."""
    bic = read_loss_curve(path, "l_bic")
    bbox = read_loss_curve(path, "l_bbox_weighted")
    return [a + b for a, b in zip(bic, bbox)]


def plot_loss_curves(path: str, curves: Mapping[str, Sequence[str]], title: str = "Proposal loss") -> str:
    """Proposal loss per step; each name maps to one or more curve CSVs drawn in one color."""
    _prepare(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    try:
        for i, (name, files) in enumerate(curves.items()):
            color = CURVE_COLORS[i % len(CURVE_COLORS)]
            for j, file in enumerate(files):
                ys = proposal_loss(file)
                ax.plot(range(len(ys)), ys, color=color, alpha=0.8, linewidth=1.0, label=name if j == 0 else None)
        ax.set_xlabel("Step")
        ax.set_ylabel("L_bic + alpha * L_bbox")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path


def plot_accuracy_table(path: str, rows: Sequence[Dict[str, object]], key: str = "model") -> str:
    """Grouped bars of task accuracies, one group per row (resolution or depth studies)."""
    _prepare(path)
    tasks = ("verify", "pose", "color", "type")
    fig, ax = plt.subplots(figsize=(7, 4))
    try:
        width = 0.8 / max(1, len(rows))
        for i, row in enumerate(rows):
            xs = [t + i * width for t in range(len(tasks))]
            ax.bar(xs, [float(row[t]) for t in tasks], width=width,
                   color=CURVE_COLORS[i % len(CURVE_COLORS)], label=str(row[key]))
        ax.set_xticks([t + 0.4 - width / 2 for t in range(len(tasks))])
        ax.set_xticklabels(tasks)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("Accuracy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path
