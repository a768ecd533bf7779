"""Matplotlib figures for the CLI reports (always rendered off-screen)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import CmcResult, MultiTrialResult  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(rows: Sequence[dict], path: str | Path) -> Path:
    """Loss components against iteration."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    its = [r["iteration"] for r in rows]
    for key in ("L_c", "L_v", "L_p", "total"):
        ax.plot(its, [r[key] for r in rows], label=key, lw=1.2 if key == "total" else 0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, ncols=4, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_cmc(result: CmcResult | MultiTrialResult, path: str | Path, title: str = "") -> Path:
    if isinstance(result, MultiTrialResult):
        cmc, std, m = result.cmc_mean, result.cmc_std, result.map_mean
    else:
        cmc, std, m = result.cmc, None, result.map
    ranks = np.arange(1, len(cmc) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ranks, cmc, marker="o", ms=3)
    if std is not None and len(result.trials) > 1:
        ax.fill_between(ranks, np.clip(cmc - std, 0, 1), np.clip(cmc + std, 0, 1), alpha=0.2)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_title(title or f"CMC (rank-1 {cmc[0]:.3f}, mAP {m:.3f})", fontsize=10)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_gate_trace(frames: np.ndarray, raw: np.ndarray, refined: np.ndarray, gates: np.ndarray,
                    path: str | Path) -> Path:
    """Rows: input frame, raw map X, refined map S, gate Z; one column per frame."""
    t = len(gates)
    fig, axes = plt.subplots(4, t, figsize=(1.4 * t + 0.6, 6), squeeze=False)
    vmax = max(float(np.abs(raw).max()), float(np.abs(refined).max()), 1e-12)
    for i in range(t):
        axes[0, i].imshow(np.clip(frames[i].transpose(1, 2, 0), 0, 1))
        axes[1, i].imshow(raw[i], cmap="viridis", vmin=0, vmax=vmax)
        axes[2, i].imshow(refined[i], cmap="viridis", vmin=0, vmax=vmax)
        axes[3, i].imshow(gates[i], cmap="magma", vmin=0, vmax=1)
        axes[0, i].set_title(f"t={i + 1}", fontsize=8)
    for row, label in enumerate(("frame", "X", "S", "Z")):
        axes[row, 0].set_ylabel(label)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_frame_grid(rows: Sequence[np.ndarray], labels: Sequence[str], path: str | Path) -> Path:
    """One row per [T, 3, h, w] sequence."""
    t = max(len(r) for r in rows)
    fig, axes = plt.subplots(len(rows), t, figsize=(0.9 * t + 0.8, 1.6 * len(rows)), squeeze=False)
    for i, (seq, label) in enumerate(zip(rows, labels)):
        for j in range(t):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(seq):
                ax.imshow(np.clip(seq[j].transpose(1, 2, 0), 0, 1))
        axes[i, 0].set_ylabel(label, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
