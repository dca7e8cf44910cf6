"""Optional SVG figures (requires matplotlib)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "bislot"
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def plot_k_sweep(curve: list[dict], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    k = [r["K"] for r in curve]
    ax.errorbar(k, [r["mean"] for r in curve], yerr=[r["std"] for r in curve], marker="o",
                capsize=3)
    ax.set_xlabel("number of slots K")
    ax.set_ylabel("test macro AUC")
    ax.set_xticks(k)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_stress(summary: list[dict], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for v in sorted({r["variant"] for r in summary}):
        rows = [r for r in summary if r["variant"] == v]
        ax.errorbar([r["sigma"] for r in rows], [r["auc_mean"] for r in rows],
                    yerr=[r["auc_std"] for r in rows], marker="o", capsize=3, label=v)
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("test macro AUC")
    ax.legend()
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out


def plot_correspondence(matrix: np.ndarray, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(3.8, 3.4))
    im = ax.imshow(np.asarray(matrix), cmap="viridis")
    ax.set_xlabel("contralateral slot")
    ax.set_ylabel("query slot")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    out = _save(fig, path)
    plt.close(fig)
    return out
