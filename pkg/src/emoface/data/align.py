"""Face registration onto per-actor templates.

One similarity transform is fitted per clip, from the first frame's eye and
nose centres to the template's, and applied unchanged to every frame so that
natural head motion after the first frame survives alignment.
"""

from __future__ import annotations

import importlib
import logging
from typing import Callable, Optional

import numpy as np

from emoface.data.clips import AlignedClip, RawClip, normalize_amplitude, normalize_pixels, resample_audio
from emoface.data.similarity import SimilarityTransform, estimate_similarity
from emoface.emotions import IMAGE_SIZE, SAMPLE_RATE, SAMPLES_PER_FRAME, VIDEO_FPS

log = logging.getLogger(__name__)

LandmarkDetector = Callable[[np.ndarray], Optional[np.ndarray]]

# 68-point scheme
JAW = slice(0, 17)
RIGHT_EYE = slice(36, 42)   # subject's right, image left
LEFT_EYE = slice(42, 48)
NOSE = slice(27, 36)
MOUTH = slice(48, 68)

MIRROR_68 = np.array(
    list(range(16, -1, -1))
    + list(range(26, 21, -1)) + list(range(21, 16, -1))
    + [27, 28, 29, 30]
    + [35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46]
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


class ClipRejected(RuntimeError):
    """A clip cannot be aligned; the message says why."""


def key_points(landmarks) -> np.ndarray:
    """Eye centres and nose centre (3x2) used to fit the alignment."""
    lm = np.asarray(landmarks, dtype=np.float64)
    return np.stack([lm[RIGHT_EYE].mean(axis=0), lm[LEFT_EYE].mean(axis=0), lm[NOSE].mean(axis=0)])


def interocular_distance(landmarks) -> float:
    pts = key_points(landmarks)
    return float(np.linalg.norm(pts[1] - pts[0]))


def symmetry_score(landmarks) -> float:
    """Mirror asymmetry of a landmark set, in units of inter-ocular distance.

    The set is reflected across the perpendicular bisector of the eye centres
    and compared with its left/right-relabelled self; 0 is perfectly frontal.
    """
    lm = np.asarray(landmarks, dtype=np.float64)
    eyes = key_points(lm)[:2]
    mid = eyes.mean(axis=0)
    axis = eyes[1] - eyes[0]
    iod = np.linalg.norm(axis)
    if iod < 1e-9:
        return float("inf")
    u = axis / iod
    rel = lm - mid
    along = rel @ u
    mirrored = lm - 2.0 * along[:, None] * u[None, :]
    return float(np.linalg.norm(mirrored[MIRROR_68] - lm, axis=1).mean() / iod)


def make_template(candidates, size: int = IMAGE_SIZE, iod_fraction: float = 0.28,
                  eye_height: float = 0.42) -> np.ndarray:
    """Pick the most frontal landmark set and place it on a ``size`` canvas.

    The chosen face is rotated so the eyes are level, scaled to the requested
    inter-ocular distance and translated so the eye midpoint sits at
    ``(size / 2, eye_height * size)``.
    """
    candidates = [np.asarray(c, dtype=np.float64) for c in candidates
                  if c is not None and np.isfinite(np.asarray(c)).all()]
    if not candidates:
        raise ClipRejected("no usable landmark sets to build a template from")
    best = min(candidates, key=symmetry_score)
    eyes = key_points(best)[:2]
    axis = eyes[1] - eyes[0]
    scale = iod_fraction * size / np.linalg.norm(axis)
    level = SimilarityTransform(scale, -float(np.arctan2(axis[1], axis[0])))
    placed = level.apply(best)
    mid = level.apply(eyes).mean(axis=0)
    return placed + (np.array([size / 2.0, eye_height * size]) - mid)


def load_detector(ref: str) -> LandmarkDetector:
    """Import a detector given as ``package.module:callable``.

    A callable that takes no arguments and returns a detector (a factory) is
    also accepted when the reference ends with ``()``.
    """
    factory = ref.endswith("()")
    target = ref[:-2] if factory else ref
    module_name, _, attr = target.partition(":")
    if not attr:
        raise ValueError(f"detector {ref!r} must look like module:callable")
    obj = getattr(importlib.import_module(module_name), attr)
    return obj() if factory else obj


def detect_all(frames, detector: LandmarkDetector) -> np.ndarray:
    out = np.full((len(frames), 68, 2), np.nan)
    for i, frame in enumerate(frames):
        try:
            lm = detector(frame)
        except Exception as exc:  # detectors are third-party code
            log.debug("landmark detector failed on frame %d: %s", i, exc)
            lm = None
        if lm is not None:
            lm = np.asarray(lm, dtype=np.float64)
            if lm.shape == (68, 2):
                out[i] = lm
    return out


def fill_missing(landmarks) -> np.ndarray:
    """Linearly interpolate frames where detection failed (NaN rows)."""
    lm = np.array(landmarks, dtype=np.float64)
    ok = np.isfinite(lm).all(axis=(1, 2))
    if ok.all() or not ok.any():
        return lm
    t = np.arange(len(lm))
    flat = lm.reshape(len(lm), -1)
    for j in range(flat.shape[1]):
        flat[~ok, j] = np.interp(t[~ok], t[ok], flat[ok, j])
    return flat.reshape(lm.shape)


def resample_indices(num_raw: int, fps_raw: float, fps_out: int = VIDEO_FPS) -> np.ndarray:
    """Nearest source frame for every output frame at ``fps_out``."""
    num_out = int(round(num_raw * fps_out / fps_raw))
    idx = np.floor(np.arange(num_out) * fps_raw / fps_out + 0.5).astype(int)
    return np.minimum(idx, num_raw - 1)


def warp_frames(frames, transform: SimilarityTransform, size: int = IMAGE_SIZE) -> np.ndarray:
    import cv2

    m = transform.matrix
    return np.stack([cv2.warpAffine(np.ascontiguousarray(f), m, (size, size),
                                    flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
                     for f in frames])


def align_clip(raw: RawClip, template_landmarks, detector: LandmarkDetector | None = None,
               size: int = IMAGE_SIZE, max_av_mismatch: float | None = None) -> AlignedClip:
    """Register a raw clip onto ``template_landmarks`` and resample to 25 FPS / 8 kHz.

    ``max_av_mismatch`` is the tolerated audio/video duration difference in
    seconds; by default one output frame period.
    """
    template = np.asarray(template_landmarks, dtype=np.float64)
    if template.shape != (68, 2):
        raise ValueError(f"template must be 68x2, got {template.shape}")

    video_dur = raw.duration
    audio_dur = len(raw.audio) / raw.sample_rate_raw
    tol = 1.0 / VIDEO_FPS if max_av_mismatch is None else max_av_mismatch
    if abs(video_dur - audio_dur) > tol + 1e-9:
        raise ClipRejected(f"{raw.name or raw.sentence_id}: audio {audio_dur:.3f}s vs video "
                           f"{video_dur:.3f}s exceeds {tol:.3f}s tolerance")

    if raw.landmarks is not None:
        lm_raw = np.asarray(raw.landmarks, dtype=np.float64)
        if lm_raw.shape != (len(raw.video_frames), 68, 2):
            raise ClipRejected(f"{raw.name}: landmark sidecar shape {lm_raw.shape} does not "
                               f"match {len(raw.video_frames)} frames")
    elif detector is not None:
        lm_raw = detect_all(raw.video_frames, detector)
    else:
        raise ValueError("align_clip needs precomputed landmarks or a detector")
    if not np.isfinite(lm_raw[0]).all():
        raise ClipRejected(f"{raw.name or raw.sentence_id}: landmark detection failed on frame 0")

    transform = estimate_similarity(key_points(lm_raw[0]), key_points(template))
    idx = resample_indices(len(raw.video_frames), raw.fps_raw)
    if len(idx) == 0:
        raise ClipRejected(f"{raw.name}: clip shorter than one output frame")

    frames = warp_frames(raw.video_frames[idx], transform, size)
    landmarks = transform.apply(fill_missing(lm_raw)[idx].reshape(-1, 2)).reshape(len(idx), 68, 2)

    audio = normalize_amplitude(resample_audio(raw.audio, raw.sample_rate_raw, SAMPLE_RATE))
    target = len(idx) * SAMPLES_PER_FRAME
    if len(audio) >= target:
        audio = audio[:target]
    else:
        audio = np.pad(audio, (0, target - len(audio)))

    meta = {"fps_raw": raw.fps_raw, "sample_rate_raw": raw.sample_rate_raw,
            "transform": {"scale": transform.scale, "rotation": transform.rotation,
                          "translation": list(transform.translation)}}
    if raw.name:
        meta["source"] = raw.name
    return AlignedClip(normalize_pixels(frames), audio.astype(np.float32),
                       landmarks.astype(np.float32), raw.emotion, raw.actor_id,
                       raw.sentence_id, meta=meta)
