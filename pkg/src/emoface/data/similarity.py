from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when landmark points cannot determine a similarity transform."""


@dataclass(frozen=True)
class SimilarityTransform:
    """4-DOF planar transform: ``p' = scale * R(rotation) @ p + translation``."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix, usable directly with ``cv2.warpAffine``."""
        c = self.scale * np.cos(self.rotation)
        s = self.scale * np.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[c, -s, tx], [s, c, ty]], dtype=np.float64)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return points @ m[:, :2].T + m[:, 2]

    __call__ = apply

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = np.cos(-self.rotation), np.sin(-self.rotation)
        tx, ty = self.translation
        itx = -inv_scale * (c * tx - s * ty)
        ity = -inv_scale * (s * tx + c * ty)
        return SimilarityTransform(inv_scale, -self.rotation, (float(itx), float(ity)))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        rotation = float(np.arctan2(np.sin(self.rotation + other.rotation),
                                    np.cos(self.rotation + other.rotation)))
        translation = self.apply(np.asarray(other.translation))
        return SimilarityTransform(self.scale * other.scale, rotation,
                                   (float(translation[0]), float(translation[1])))


def estimate_similarity(src_points, dst_points) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src_points`` onto ``dst_points``.

    Solves the linear system in ``(a, b, tx, ty)`` with ``a = s cos(r)`` and
    ``b = s sin(r)``; every point contributes two equations.
    """
    src = np.asarray(src_points, dtype=np.float64)
    dst = np.asarray(dst_points, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"expected matching Nx2 point arrays, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateGeometryError("need at least three points")
    if not (np.isfinite(src).all() and np.isfinite(dst).all()):
        raise DegenerateGeometryError("non-finite landmark coordinates")

    centered = src - src.mean(axis=0)
    spread = np.linalg.svd(centered, compute_uv=False)
    if spread[0] < 1e-9 or spread[1] < 1e-9 * max(1.0, spread[0]) or spread[1] / spread[0] < 1e-6:
        raise DegenerateGeometryError("source points are collinear or duplicated")

    n = len(src)
    A = np.zeros((2 * n, 4))
    A[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
    A[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
    a, b, tx, ty = np.linalg.lstsq(A, dst.reshape(-1), rcond=None)[0]
    scale = float(np.hypot(a, b))
    if scale <= 0:
        raise DegenerateGeometryError("destination points collapse to a single point")
    return SimilarityTransform(scale, float(np.arctan2(b, a)), (float(tx), float(ty)))
