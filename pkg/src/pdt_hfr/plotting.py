"""PNG figures written next to the CSV/text reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(path, curves: dict[str, list[tuple[float, float]]]) -> Path:
    """One ROC line per label, FAR on a log axis."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, points in curves.items():
        far = [max(p[0], 1e-4) for p in points]
        ax.step(far, [p[1] for p in points], where="post", label=label)
    ax.set_xscale("log")
    ax.set_xlim(1e-4, 1.0)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(path, train_losses: Sequence[float], val_losses: Sequence[float], best_epoch: int) -> Path:
    epochs = range(1, len(train_losses) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(epochs, train_losses, marker="o", label="train")
    ax.plot(epochs, val_losses, marker="s", label="validation")
    ax.axvline(best_epoch, color="grey", linestyle="--", linewidth=1, label=f"selected epoch {best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(path, fractions: Sequence[float], eers: Sequence[float], rank1s: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(fractions, eers, marker="o", label="EER")
    ax.plot(fractions, rank1s, marker="s", label="rank-1")
    ax.set_xscale("log")
    ax.set_xlabel("fraction of training identities")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def _as_display(img):
    img = np.asarray(img)
    if img.shape[0] == 1:
        return img[0], "gray"
    return np.clip(np.moveaxis(img, 0, -1), 0.0, 1.0), None


def plot_transform(path, image, transformed) -> Path:
    """Input image and PDT output side by side."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax, img, title in zip(axes, (image, transformed), ("input", "PDT output")):
        data, cmap = _as_display(img)
        ax.imshow(data, cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
