"""Report artifacts: JSON, delimited metrics, and rendered figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def write_json(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_finetune_csv(report: dict, path: str | Path) -> None:
    """One row per (learning rate, epoch) with loss and validation metrics."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["learning_rate", "epoch", "train_loss", "valid_precision", "valid_recall", "valid_f1"])
        for entry in report["grid"]:
            for row in entry["epochs"]:
                writer.writerow(
                    [
                        entry["learning_rate"],
                        row["epoch"],
                        f"{row['train_loss']:.6f}",
                        f"{row['valid']['precision']:.6f}",
                        f"{row['valid']['recall']:.6f}",
                        f"{row['valid']['f1']:.6f}",
                    ]
                )


def save_finetune_figure(report: dict, path: str | Path) -> None:
    """Training loss and validation F1 curves, one line per learning rate."""
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for entry in report["grid"]:
        label = f"lr={entry['learning_rate']:g}"
        epochs = [row["epoch"] for row in entry["epochs"]]
        ax_loss.plot(epochs, [row["train_loss"] for row in entry["epochs"]], marker=".", label=label)
        ax_f1.plot(epochs, [row["valid"]["f1"] for row in entry["epochs"]], marker=".", label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("validation F1")
    ax_f1.set_ylim(-0.02, 1.02)
    selected = report.get("selected", {})
    if selected.get("learning_rate") is not None:
        ax_f1.axvline(selected["epoch"], color="gray", lw=0.8, ls="--")
        ax_f1.set_title(f"best: lr={selected['learning_rate']:g} epoch {selected['epoch']}", fontsize=9)
    for ax in (ax_loss, ax_f1):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_mlm_csv(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss"])
        for epoch, loss in enumerate(report["epoch_losses"], start=1):
            writer.writerow([epoch, f"{loss:.6f}"])


def save_mlm_figure(report: dict, path: str | Path) -> None:
    """Masked-token training curve with the held-out before/after levels."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    epochs = range(1, len(report["epoch_losses"]) + 1)
    ax.plot(list(epochs), report["epoch_losses"], marker="o", label="train")
    ax.axhline(report["initial_heldout_loss"], color="tab:red", lw=0.9, ls=":", label="held-out before")
    ax.axhline(report["final_heldout_loss"], color="tab:green", lw=0.9, ls="--", label="held-out after")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked-token loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_storage_csv(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file_kind", "index", "bytes"])
        writer.writerow(["backbone", 0, report["backbone_bytes"]])
        for i, size in enumerate(report["per_adapter_bytes"]):
            writer.writerow(["adapter", i, size])


def save_storage_figure(report: dict, path: str | Path) -> None:
    """Backbone vs adapter checkpoint sizes on a log scale."""
    adapters = report["per_adapter_bytes"]
    mean_adapter = sum(adapters) / len(adapters) if adapters else 0.0
    fig, ax = plt.subplots(figsize=(4.6, 3.6))
    bars = ax.bar(
        ["backbone", "adapter (mean)"],
        [report["backbone_bytes"], mean_adapter],
        color=["tab:blue", "tab:orange"],
        width=0.55,
    )
    ax.set_yscale("log")
    ax.set_ylabel("checkpoint bytes")
    ax.bar_label(bars, fmt="%.0f", fontsize=8)
    ax.set_title(f"adapter/backbone byte ratio: {report['ratio']:.4f}", fontsize=9)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
