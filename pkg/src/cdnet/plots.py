"""PNG figures for training traces, ablations, sweeps and the attention benchmark."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trace(trace: list[dict], path) -> Path:
    """Train loss and validation AUC per epoch."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    train = [r for r in trace if r["split"] == "train"]
    ax.plot([r["epoch"] for r in train], [r["loss"] for r in train], "o-", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    valid = [r for r in trace if r["split"] == "valid"]
    if valid:
        ax2 = ax.twinx()
        ax2.plot([r["epoch"] for r in valid], [r["auc"] for r in valid], "s--", color="tab:orange",
                 label="valid AUC")
        ax2.set_ylabel("AUC")
        ax2.legend(loc="lower right")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar([r["variant"] for r in rows], [r["auc"] for r in rows], color="tab:blue")
    finite = [r["auc"] for r in rows if r["auc"] == r["auc"]]
    if finite:
        ax.set_ylim(min(finite) - 0.02, max(finite) + 0.02)
    ax.set_ylabel("test AUC")
    return _save(fig, path)


def plot_sweep(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["value"] for r in rows], [r["auc"] for r in rows], "o-")
    ax.set_xlabel(rows[0]["axis"] if rows else "value")
    ax.set_ylabel("test AUC")
    return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    """Quadratic-term multiply-adds of both token sets against sequence length."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ls = [r["L"] for r in rows]
    ax.plot(ls, [r["quad_macs_full"] for r in rows], "o-", label="full sequence")
    ax.plot(ls, [r["quad_macs_cdnet"] for r in rows], "s-", label="selected tokens")
    ax.set_xlabel("L")
    ax.set_ylabel("attention multiply-adds (quadratic term)")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)
