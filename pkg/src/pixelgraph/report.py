"""Report artifacts: delimited curves and metrics plus matplotlib renderings."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport


def write_loss_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "ce", "kl", "mse"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['total']:.10g}", f"{row['ce']:.10g}",
                             f"{row['kl']:.10g}", f"{row['mse']:.10g}"])


def plot_loss_curve(path, history: list[dict]) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style in (("total", "-"), ("ce", "--"), ("kl", ":"), ("mse", "-.")):
        values = [row[key] for row in history]
        if any(v != 0.0 for v in values):
            ax.plot(epochs, values, style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_eval_csv(path, report: EvalReport, class_names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou", "accuracy", "pixels"])
        for c, name in enumerate(class_names):
            iou = report.per_class_iou[c]
            acc = report.per_class_acc[c]
            writer.writerow([
                name,
                "" if np.isnan(iou) else f"{iou:.6f}",
                "" if np.isnan(acc) else f"{acc:.6f}",
                int(report.pixel_counts[c]),
            ])
        writer.writerow(["mean", f"{report.mean_iou:.6f}", f"{report.mean_acc:.6f}", ""])


def plot_eval_report(path, report: EvalReport, class_names) -> None:
    k = len(class_names)
    x = np.arange(k)
    iou = np.nan_to_num(report.per_class_iou, nan=0.0)
    acc = np.nan_to_num(report.per_class_acc, nan=0.0)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, iou, width=0.4, label="IoU")
    ax.bar(x + 0.2, acc, width=0.4, label="accuracy")
    ax.axhline(report.mean_iou, color="k", linestyle=":", linewidth=1,
               label=f"mIoU {report.mean_iou:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(class_names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_entropy_curve(path, entropy_history: list[float], n_nodes: int) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(entropy_history)), entropy_history, "-o", markersize=3)
    ax.axhline(np.log(n_nodes), color="k", linestyle=":", linewidth=1,
               label="uniform (ln N)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("node-usage entropy")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
