"""Matplotlib figures for the report and sweep commands (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def heatmap(grid: dict, path, title: str = "held-out accuracy") -> Path:
    alphas = sorted({a for a, _ in grid}, reverse=True)
    betas = sorted({b for _, b in grid}, reverse=True)
    m = np.array([[grid.get((a, b), np.nan) for b in betas] for a in alphas])
    fig, ax = plt.subplots(figsize=(1.2 * len(betas) + 2, 1.0 * len(alphas) + 1.5))
    im = ax.imshow(m, cmap="viridis")
    ax.set_xticks(range(len(betas)), [f"{b:g}" for b in betas])
    ax.set_yticks(range(len(alphas)), [f"{a:g}" for a in alphas])
    ax.set_xlabel("beta")
    ax.set_ylabel("alpha")
    for i in range(len(alphas)):
        for j in range(len(betas)):
            if np.isfinite(m[i, j]):
                ax.text(j, i, f"{100 * m[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    return _save(fig, path)


def accuracy_bars(rows, domains, table, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(5, 1.6 * len(domains) + 2), 3.5))
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(domains))
    for k, r in enumerate(rows):
        vals = [100 * table.get((r, d), np.nan) for d in domains]
        ax.bar(x + k * width, vals, width, label=r)
    ax.set_xticks(x + width * (len(rows) - 1) / 2, domains)
    ax.set_ylabel("held-out accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    return _save(fig, path)


def learning_curves(history: list[dict], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (dom, split) in sorted({(r["domain"], r["split"]) for r in history}):
        rows = sorted((r for r in history if r["domain"] == dom and r["split"] == split), key=lambda r: r["epoch"])
        ax.plot([r["epoch"] for r in rows], [r["accuracy"] for r in rows],
                ls="-" if split == "test" else "--", label=f"{dom} ({split})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def propensity_hist(pi, domains, path) -> Path:
    pi = np.asarray(pi)
    domains = np.asarray(domains)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for d in np.unique(domains):
        ax.hist(pi[domains == d], bins=np.linspace(0, 1, 41), alpha=0.6, label=str(d))
    ax.set_xlabel("propensity")
    ax.set_ylabel("samples")
    ax.legend(fontsize=7)
    return _save(fig, path)
