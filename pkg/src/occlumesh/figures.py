"""Figure rendering for training logs and evaluation reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curve(jsonl_path, out_png) -> Path:
    """Loss components over iterations from a training JSONL log."""
    records = []
    with open(jsonl_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValueError(f"empty loss log {jsonl_path}")
    its = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in (("total", "total"), ("color", "color"),
                       ("mask", "mask"), ("eikonal", "eikonal")):
        vals = [r.get(key) for r in records]
        if any(v is not None for v in vals):
            ax.plot(its, vals, label=label, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_view_comparison(rendered: np.ndarray, target: np.ndarray,
                         mask: np.ndarray, out_png) -> Path:
    """Side-by-side rendered vs. target image with the difference map."""
    diff = np.abs(rendered - target).mean(axis=-1) * (np.asarray(mask) > 0)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    axes[0].imshow(np.clip(rendered, 0, 1))
    axes[0].set_title("rendered")
    axes[1].imshow(np.clip(target, 0, 1))
    axes[1].set_title("target")
    im = axes[2].imshow(diff, cmap="magma", vmin=0, vmax=max(diff.max(), 1e-6))
    axes[2].set_title("masked |diff|")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_metric_bars(per_scene: list[dict], out_png) -> Path:
    """Per-scene chamfer and PSNR bars from an evaluation report."""
    if not per_scene:
        raise ValueError("no per-scene metrics to plot")
    idx = np.arange(len(per_scene))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    ch = [r.get("chamfer", np.nan) for r in per_scene]
    ps = [r.get("psnr", np.nan) for r in per_scene]
    axes[0].bar(idx, ch, color="tab:blue")
    axes[0].set_title("chamfer (m$^2$)")
    axes[1].bar(idx, ps, color="tab:orange")
    axes[1].set_title("PSNR (dB)")
    for ax in axes:
        ax.set_xlabel("scene")
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png
