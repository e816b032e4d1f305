"""Report figures rendered to PNG files (headless backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_losses(rows: Sequence[Mapping], path, title: str = "training losses") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    phases = sorted({r["phase"] for r in rows})
    for phase in phases:
        sel = [r for r in rows if r["phase"] == phase]
        ax.plot(range(len(sel)), [r["total"] for r in sel], label=f"{phase} total")
        if any(r["L_MSC"] for r in sel):
            ax.plot(range(len(sel)), [r["L_MSC"] for r in sel], "--", label=f"{phase} MSC")
        if any(r["L_MJAP"] for r in sel):
            ax.plot(range(len(sel)), [r["L_MJAP"] for r in sel], ":", label=f"{phase} MJAP")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if phases:
        ax.legend(fontsize=7)
    return _save(fig, path)


def plot_embedding_2d(coords: np.ndarray, domains: Sequence[int], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    domains = np.asarray(domains)
    for k in sorted(set(domains.tolist())):
        sel = domains == k
        ax.scatter(coords[sel, 0], coords[sel, 1], s=6, label=f"domain {k}")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize=7, markerscale=2)
    return _save(fig, path)


def plot_similarity(mean: np.ndarray, domains: Sequence[int], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(mean, vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_xticks(range(len(domains)), [str(d) for d in domains])
    ax.set_yticks(range(len(domains)), [str(d) for d in domains])
    for (i, j), v in np.ndenumerate(mean):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_attention(image: np.ndarray, alpha: np.ndarray, path, title: str = "") -> Path:
    """Image with the highest-resolution attention coefficients overlaid."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.5))
    axes[0].imshow(image, cmap="gray")
    axes[0].set_title("input")
    axes[1].imshow(image, cmap="gray")
    axes[1].imshow(alpha, cmap="jet", alpha=0.5, vmin=0, vmax=1)
    axes[1].set_title(title or "attention")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)


def plot_dice_summary(aggregate: Mapping, path, title: str = "mean Dice per domain") -> Path:
    keys = sorted(k for k in aggregate if k.isdigit())
    means = [aggregate[k]["dice"]["mean"] or 0.0 for k in keys]
    stds = [aggregate[k]["dice"]["std"] or 0.0 for k in keys]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(keys, means, yerr=stds, capsize=4)
    ax.set_ylim(0, 1)
    ax.set_xlabel("domain")
    ax.set_ylabel("Dice")
    ax.set_title(title)
    return _save(fig, path)
