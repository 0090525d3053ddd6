"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from emoface.data.clips import denormalize_pixels  # noqa: E402
from emoface.emotions import EMOTIONS  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


@contextmanager
def figure_style():
    with plt.rc_context(STYLE):
        yield


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_confusion(matrix, path, labels=EMOTIONS, title: str | None = None) -> Path:
    """Row-normalized confusion matrix with the percentage printed in each cell."""
    m = np.asarray(matrix, dtype=float)
    with figure_style():
        fig, ax = plt.subplots(figsize=(4.2, 3.8))
        im = ax.imshow(m, cmap="Blues", vmin=0, vmax=100)
        ax.set_xticks(range(len(labels)), [l[:3].title() for l in labels])
        ax.set_yticks(range(len(labels)), [l[:3].title() for l in labels])
        ax.set_xlabel("Predicted")
        ax.set_ylabel("True")
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                ax.text(j, i, f"{m[i, j]:.0f}", ha="center", va="center", fontsize=7,
                        color="white" if m[i, j] > 50 else "black")
        ax.spines[:].set_visible(False)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="%")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_metric_distributions(report, path) -> Path:
    metrics = [("psnr", "PSNR (dB)"), ("ssim", "SSIM"), ("nlmd", "NLMD")]
    with figure_style():
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.4))
        for ax, (key, label) in zip(axes, metrics):
            values = np.array([getattr(c, key) for c in report.clips], dtype=float)
            values = values[np.isfinite(values)]
            if values.size:
                ax.hist(values, bins=min(20, max(1, values.size)), color="C0")
                ax.axvline(values.mean(), color="C1", lw=1)
            else:
                ax.text(0.5, 0.5, "n/a", transform=ax.transAxes, ha="center")
            ax.set_xlabel(label)
        axes[0].set_ylabel("clips")
        return _save(fig, path)


def plot_losses(log_csv, path) -> Path:
    with open(log_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    keys = ["mrm_l1", "perceptual", "frame_gan", "emotion_gan", "critic", "emotion_d"]
    it = np.array([int(r["iteration"]) for r in rows])
    with figure_style():
        fig, axes = plt.subplots(2, 3, figsize=(8, 4.5), sharex=True)
        for ax, key in zip(axes.ravel(), keys):
            values = np.array([float(r[key]) if r.get(key) not in (None, "") else np.nan for r in rows])
            ax.plot(it, values, lw=0.8)
            ax.set_title(key)
        for ax in axes[-1]:
            ax.set_xlabel("iteration")
        return _save(fig, path)


def _strip(frames, every: int) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = denormalize_pixels(frames)
    return np.concatenate(list(frames[::every]), axis=1)


def save_sample_grid(real, fake, path, every: int = 5) -> Path:
    """Ground-truth row above generated row, every ``every``-th frame."""
    n = min(len(real), len(fake))
    grid = np.concatenate([_strip(real[:n], every), _strip(fake[:n], every)], axis=0)
    import cv2

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), cv2.cvtColor(grid, cv2.COLOR_RGB2BGR))
    return path


def plot_emotion_rows(videos: dict, path, condition_image=None, every: int = 5) -> Path:
    """One row per emotion condition, one frame per 0.2 s at 25 FPS."""
    names = [e for e in EMOTIONS if e in videos]
    with figure_style():
        fig, axes = plt.subplots(len(names), 1, figsize=(8, 1.1 * len(names)), squeeze=False)
        for ax, name in zip(axes[:, 0], names):
            strip = _strip(videos[name], every)
            if condition_image is not None:
                strip = np.concatenate([_strip(np.asarray(condition_image)[None], 1), strip], axis=1)
            ax.imshow(strip)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_ylabel(name[:3].title(), rotation=0, ha="right", va="center")
            ax.spines[:].set_visible(False)
        return _save(fig, path)
