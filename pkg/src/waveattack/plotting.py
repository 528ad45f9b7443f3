"""Matplotlib figures for the CLI report path.  Everything renders off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def _hwc(image) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64).transpose(1, 2, 0), 0.0, 1.0)


def training_curves(records: list, path, title: str = "training") -> None:
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("L1", "L2", "L3", "Lr", "loss"):
        vals = [r.get(key) for r in records]
        if any(v is not None and v != 0.0 for v in vals):
            ax1.plot(epochs, [np.nan if v is None else v for v in vals], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["train_ba"] for r in records], color="k")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train accuracy (benign part)")
    ax2.set_ylim(0, 1)
    fig.suptitle(title)
    _save(fig, path)


def strip_histogram(benign: np.ndarray, poisoned: np.ndarray, path, title: str = "STRIP") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0.0, max(float(np.max(benign)), float(np.max(poisoned)), 1e-6), 30)
    ax.hist(benign, bins=bins, alpha=0.6, label="benign")
    ax.hist(poisoned, bins=bins, alpha=0.6, label="poisoned")
    ax.set_xlabel("mean entropy (nats)")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def pruning_curve(curve: list, path, title: str = "fine-pruning") -> None:
    fr = [pt["fraction"] for pt in curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(fr, [pt["ba"] for pt in curve], marker="o", label="BA")
    ax.plot(fr, [pt["asr"] for pt in curve], marker="s", label="ASR")
    ax.set_xlabel("fraction of last-conv channels pruned")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def anomaly_bars(norms, indices, path, title: str = "Neural Cleanse") -> None:
    k = len(norms)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(range(k), np.nan_to_num(np.asarray(norms, dtype=float)))
    ax1.set_xlabel("class")
    ax1.set_ylabel("mask L1 norm")
    ax2.bar(range(k), np.nan_to_num(np.asarray(indices, dtype=float), posinf=0.0))
    ax2.axhline(2.0, color="r", linestyle="--")
    ax2.set_xlabel("class")
    ax2.set_ylabel("anomaly index")
    fig.suptitle(title)
    _save(fig, path)


def score_histogram(scores, flags, path, title: str = "spectral signature") -> None:
    scores = np.asarray(scores)
    flags = np.asarray(flags).astype(bool)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(scores.min(), scores.max() + 1e-12, 30)
    ax.hist(scores[~flags], bins=bins, alpha=0.6, label="benign")
    ax.hist(scores[flags], bins=bins, alpha=0.6, label="poisoned")
    ax.set_xlabel("|correlation with top singular vector|")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def heatmap_grid(images, heatmaps_by_row: dict, path, title: str = "GradCAM") -> None:
    rows = list(heatmaps_by_row.items())
    n = len(images)
    fig, axes = plt.subplots(len(rows) + 1, n, figsize=(1.6 * n, 1.6 * (len(rows) + 1)), squeeze=False)
    for j, img in enumerate(images):
        axes[0, j].imshow(_hwc(img), interpolation="nearest")
    for i, (label, maps) in enumerate(rows, start=1):
        for j, m in enumerate(maps):
            axes[i, j].imshow(_hwc(images[j]), interpolation="nearest")
            axes[i, j].imshow(m, cmap="jet", alpha=0.5, vmin=0, vmax=1, interpolation="bilinear")
        axes[i, 0].set_ylabel(label, fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    _save(fig, path)


def probe_grid(original, recons: dict, psnrs: dict, path) -> None:
    fig, axes = plt.subplots(1, len(recons) + 1, figsize=(2.2 * (len(recons) + 1), 2.6))
    axes[0].imshow(_hwc(original), interpolation="nearest")
    axes[0].set_title("original", fontsize=9)
    for ax, (band, img) in zip(axes[1:], recons.items()):
        ax.imshow(_hwc(img), interpolation="nearest")
        p = psnrs[band]
        ax.set_title(f"{band}: {'INF' if np.isinf(p) else f'{p:.2f} dB'}", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, path)


def sample_grid(clean, poisoned, residual_mag: float, path, title: str = "samples") -> None:
    n = len(clean)
    fig, axes = plt.subplots(3, n, figsize=(1.6 * n, 5), squeeze=False)
    for j in range(n):
        axes[0, j].imshow(_hwc(clean[j]), interpolation="nearest")
        axes[1, j].imshow(_hwc(poisoned[j]), interpolation="nearest")
        res = 0.5 + residual_mag * (np.asarray(poisoned[j], dtype=float) - np.asarray(clean[j], dtype=float))
        axes[2, j].imshow(_hwc(res), interpolation="nearest")
    for ax, label in zip(axes[:, 0], ("clean", "poisoned", f"residual x{residual_mag:g}")):
        ax.set_ylabel(label, fontsize=8)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    _save(fig, path)
