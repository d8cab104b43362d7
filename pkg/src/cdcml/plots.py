"""Figure rendering for the report paths.

Every command that writes a delimited table can render a PNG next to
it. Figures carry no timestamps (the PNG Date field is stripped) so
reruns with the same inputs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluator import ABLATION_FLAGS, AblationRow, EvalReport
from .trainer import TrainHistory


def save_figure(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Date": None})
    plt.close(fig)
    return path


def history_figure(history: TrainHistory, path: str | Path) -> Path:
    """Per-epoch training terms (log scale) and validation metrics."""
    epochs = [r["epoch"] for r in history.records]
    term_cols = [c for c in history.columns if c.startswith("train_")]
    val_cols = [c for c in history.columns if c.startswith("val_")]

    fig, (ax_train, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for col in term_cols:
        ax_train.plot(epochs, [r[col] for r in history.records], label=col[len("train_"):])
    ax_train.set_yscale("log")
    ax_train.set_xlabel("epoch")
    ax_train.set_ylabel("training loss")
    ax_train.legend(fontsize=7)
    for col in val_cols:
        ax_val.plot(epochs, [r[col] for r in history.records], label=col[len("val_"):])
    ax_val.set_yscale("log")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation metric")
    ax_val.legend(fontsize=7)
    fig.tight_layout()
    return save_figure(fig, path)


def eval_figure(
    report: EvalReport,
    pred_sim: np.ndarray,
    true_sim: np.ndarray,
    pred_va: dict[str, np.ndarray],
    true_va: dict[str, np.ndarray],
    path: str | Path,
) -> Path:
    """Predicted-vs-true similarity scatter plus VA scatter per modality."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    ax = axes[0]
    ax.plot([0, 1], [0, 1], color="gray", lw=0.8)
    ax.scatter(true_sim, pred_sim, s=4, alpha=0.4)
    ax.set_xlabel("true similarity")
    ax.set_ylabel("predicted similarity")
    ax.set_title(f"{report.split}: mse={report.sim_mse:.4f} mae={report.sim_mae:.4f}")
    for ax, modality in ((axes[1], "image"), (axes[2], "music")):
        ax.scatter(true_va[modality][:, 0], true_va[modality][:, 1], s=4, alpha=0.3,
                   label="true")
        ax.scatter(pred_va[modality][:, 0], pred_va[modality][:, 1], s=4, alpha=0.3,
                   label="predicted")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("valence")
        ax.set_ylabel("arousal")
        ax.set_title(f"{modality} VA")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return save_figure(fig, path)


def ablation_figure(rows: Sequence[AblationRow], path: str | Path) -> Path:
    """Mean held-out similarity MSE per loss-toggle row."""
    labels = [row.label() for row in rows]
    values = [row.report.sim_mse for row in rows]
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(rows)), 4))
    ax.bar(range(len(rows)), values, color="steelblue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("similarity MSE")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.4f}", ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    return save_figure(fig, path)


def match_figure(
    music_id: str,
    music_va: tuple[float, float] | None,
    pool_va: np.ndarray,
    ranked_va: np.ndarray,
    ranked_ids: Sequence[str],
    path: str | Path,
) -> Path:
    """The clip and its top-k images in the VA unit square."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(pool_va[:, 0], pool_va[:, 1], s=6, color="lightgray", label="image pool")
    ax.scatter(ranked_va[:, 0], ranked_va[:, 1], s=30, color="tab:orange",
               label=f"top {len(ranked_ids)}")
    if music_va is not None:
        ax.scatter([music_va[0]], [music_va[1]], marker="*", s=220, color="tab:red",
                   label=music_id)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("valence")
    ax.set_ylabel("arousal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return save_figure(fig, path)
