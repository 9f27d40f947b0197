"""Figure and image-file output helpers.

Everything renders through the Agg backend so commands work headless;
reports pair a delimited table with PNG figures in the same directory.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image


def to_uint8(image) -> np.ndarray:
    """Map a (3, H, W) float image in [-1, 1] to (H, W, 3) uint8."""
    arr = np.asarray(image.detach() if torch.is_tensor(image) else image, dtype=np.float64)
    arr = np.clip((arr.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255)
    return np.round(arr).astype(np.uint8)


def save_image(image, path: Path):
    """Write one synthesized image as an 8-bit PNG."""
    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG")


def load_image(path: Path) -> np.ndarray:
    """Read an 8-bit RGB PNG back to a (3, H, W) float image in [-1, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_loss_curves(history: Sequence[dict], path: Path):
    """Per-term loss curves over training steps."""
    if not history:
        return
    steps = [r["step"] for r in history]
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    axes[0].plot(steps, [r["loss_g_total"] for r in history], label="generator total")
    axes[0].plot(steps, [r["loss_d"] for r in history], label="discriminator")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].grid(alpha=0.3)
    for key, label in (("loss_g_adv", "adversarial"), ("loss_fm", "feature matching"),
                       ("loss_perc", "perceptual"), ("loss_kl", "kl")):
        axes[1].plot(steps, [r[key] for r in history], label=label)
    axes[1].set_xlabel("step")
    axes[1].set_yscale("symlog")
    axes[1].legend()
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_metric_bars(rows: Sequence[tuple[str, float]], path: Path):
    """Bar chart of metric name/value pairs."""
    if not rows:
        return
    names = [r[0] for r in rows]
    values = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(1.2 * len(rows) + 2, 4))
    bars = ax.bar(names, values, color="steelblue", alpha=0.85)
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                f"{value:.4g}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("value")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_contact_sheet(images: Sequence, path: Path, cols: int = 4,
                       titles: Sequence[str] = None):
    """Grid of images on a single figure."""
    if not len(images):
        return
    cols = max(1, min(cols, len(images)))
    rows = (len(images) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < len(images):
            ax.imshow(to_uint8(images[i]))
            if titles is not None and i < len(titles):
                ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
