from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from emoface.data.align import ClipRejected, key_points
from emoface.data.similarity import SimilarityTransform, estimate_similarity

log = logging.getLogger(__name__)


@dataclass
class ComparisonClip:
    frames: np.ndarray               # T x H x W x 3, any size
    first_landmarks: np.ndarray      # 68 x 2 on frame 0 (NaN when detection failed)
    name: str = ""


def align_for_comparison(clips, template_landmarks=None, canvas: tuple[int, int] | None = None,
                         crop: tuple[int, int] | None = None):
    """Warp videos of different framing onto one template and crop them identically.

    Each clip's first-frame eye/nose centres are registered to the template's
    with a similarity transform; every frame is warped onto a ``canvas``
    (height, width) and centre-cropped to ``crop``.  By default the template
    is the first clip's landmarks, the canvas is the first clip's frame size
    and the crop is the smallest height and width among the inputs.

    Returns ``(aligned_frames, transforms, excluded_names)``.
    """
    clips = list(clips)
    if not clips:
        raise ValueError("nothing to align")
    ref = clips[0]
    if template_landmarks is None:
        template_landmarks = ref.first_landmarks
    template = np.asarray(template_landmarks, dtype=np.float64)
    if not np.isfinite(template).all():
        raise ClipRejected("template landmarks are missing")
    if canvas is None:
        canvas = ref.frames.shape[1:3]
    if crop is None:
        crop = (min(c.frames.shape[1] for c in clips), min(c.frames.shape[2] for c in clips))
    ch, cw = min(crop[0], canvas[0]), min(crop[1], canvas[1])
    top, left = (canvas[0] - ch) // 2, (canvas[1] - cw) // 2

    aligned, transforms, excluded = [], [], []
    for clip in clips:
        lm = np.asarray(clip.first_landmarks, dtype=np.float64)
        if not np.isfinite(lm).all():
            log.warning("excluding %s: no landmarks on the first frame", clip.name or "clip")
            excluded.append(clip.name)
            continue
        tf = estimate_similarity(key_points(lm), key_points(template))
        if _is_identity(tf) and tuple(clip.frames.shape[1:3]) == tuple(canvas):
            warped = np.asarray(clip.frames)
        else:
            warped = _warp_to_canvas(clip.frames, tf, canvas)
        aligned.append(warped[:, top:top + ch, left:left + cw])
        transforms.append(tf)
    return aligned, transforms, excluded


def _is_identity(tf: SimilarityTransform, tol: float = 1e-3) -> bool:
    return (abs(tf.scale - 1.0) < tol and abs(tf.rotation) < tol
            and max(abs(tf.translation[0]), abs(tf.translation[1])) < tol * 10)


def _warp_to_canvas(frames, tf: SimilarityTransform, canvas) -> np.ndarray:
    import cv2

    frames = np.asarray(frames)
    h, w = canvas
    m = tf.matrix
    return np.stack([cv2.warpAffine(np.ascontiguousarray(f), m, (w, h), flags=cv2.INTER_LINEAR,
                                    borderMode=cv2.BORDER_REPLICATE) for f in frames])

