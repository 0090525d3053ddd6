from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emoface.data.align import MOUTH
from emoface.emotions import IMAGE_SIZE


@dataclass
class MouthRegionMask:
    weights: np.ndarray          # H x W, peak 1
    center: tuple[float, float]  # (cx, cy) pixels
    sigma: tuple[float, float]   # (sx, sy) pixels

    def loss_weights(self, base: float = 0.1) -> np.ndarray:
        """Per-pixel reconstruction weight ``base + (1 - base) * gaussian``."""
        return (base + (1.0 - base) * self.weights).astype(np.float32)


def gaussian_map(center, sigma, size: int = IMAGE_SIZE) -> np.ndarray:
    cx, cy = center
    sx, sy = sigma
    x = np.arange(size, dtype=np.float64)
    gx = np.exp(-0.5 * ((x - cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((x - cy) / sy) ** 2)
    g = np.outer(gy, gx)
    return g / g.max()


def compute_mrm(mouth_landmarks, size: int = IMAGE_SIZE, min_sigma: float = 8.0,
                sigma: tuple[float, float] | None = None) -> MouthRegionMask:
    """Gaussian mouth mask from ``T x K x 2`` mouth landmarks.

    Centre is the temporal mean of the per-frame mouth centroid; by default
    each sigma is half the temporal-mean mouth bounding box extent, floored
    at ``min_sigma``.  Full 68-point sets are accepted and cut to the mouth.
    """
    lm = np.asarray(mouth_landmarks, dtype=np.float64)
    if lm.ndim == 2:
        lm = lm[None]
    if lm.ndim != 3 or lm.shape[-1] != 2 or lm.shape[0] == 0 or lm.shape[1] == 0:
        raise ValueError(f"expected T x K x 2 mouth landmarks, got shape {lm.shape}")
    if lm.shape[1] == 68:
        lm = lm[:, MOUTH]
    valid = np.isfinite(lm).all(axis=(1, 2))
    if not valid.any():
        raise ValueError("no finite mouth landmarks")
    lm = lm[valid]

    centroid = lm.mean(axis=1).mean(axis=0)
    if sigma is None:
        extent = (lm.max(axis=1) - lm.min(axis=1)).mean(axis=0)
        sigma = (max(min_sigma, extent[0] / 2.0), max(min_sigma, extent[1] / 2.0))
    weights = gaussian_map(centroid, sigma, size)
    # put the exact peak on the rounded centroid pixel so argmax is unambiguous
    cx = int(np.clip(np.rint(centroid[0]), 0, size - 1))
    cy = int(np.clip(np.rint(centroid[1]), 0, size - 1))
    weights[cy, cx] = 1.0
    return MouthRegionMask(weights.astype(np.float32), (float(centroid[0]), float(centroid[1])),
                           (float(sigma[0]), float(sigma[1])))
