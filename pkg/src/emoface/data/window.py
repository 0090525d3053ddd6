from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emoface.data.augment import AugmentConfig, apply_params, sample_params
from emoface.data.clips import AlignedClip, load_aligned_clip
from emoface.data.manifest import Manifest
from emoface.data.mrm import MouthRegionMask, compute_mrm
from emoface.emotions import SAMPLES_PER_FRAME, emotion_index

WINDOW_FRAMES = 32


@dataclass
class TrainingWindow:
    frames: np.ndarray           # W x 128 x 128 x 3
    audio: np.ndarray            # W * 320 samples
    condition_image: np.ndarray  # frame 0 of the full clip
    emotion: str
    mrm: MouthRegionMask
    start: int = 0

    @property
    def label(self) -> int:
        return emotion_index(self.emotion)


def _generator(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_window(clip: AlignedClip, rng_seed, window: int = WINDOW_FRAMES,
                  augment_cfg: AugmentConfig | None = None, min_sigma: float = 8.0) -> TrainingWindow:
    """Cut a random ``window``-frame training sample from an aligned clip.

    The start index is uniform over every valid position and the matching
    audio span is ``[start * 320, (start + window) * 320)``.  With
    ``augment_cfg`` the frames and the condition image share one draw of
    photometric parameters.
    """
    n = clip.num_frames
    if n < window:
        raise ValueError(f"clip has {n} frames, fewer than the {window}-frame window")
    rng = _generator(rng_seed)
    start = int(rng.integers(0, n - window + 1))
    frames = clip.video_frames[start:start + window]
    cond = clip.video_frames[0]
    if augment_cfg is not None:
        params = sample_params(rng, augment_cfg)
        both = apply_params(np.concatenate([cond[None], frames]), params)
        cond, frames = both[0], both[1:]
    audio = clip.audio[start * SAMPLES_PER_FRAME:(start + window) * SAMPLES_PER_FRAME]
    if len(audio) < window * SAMPLES_PER_FRAME:
        audio = np.pad(audio, (0, window * SAMPLES_PER_FRAME - len(audio)))
    lm = clip.landmarks[start:start + window]
    if np.isfinite(lm).all(axis=(1, 2)).any():
        mrm = compute_mrm(lm, min_sigma=min_sigma)
    else:
        mrm = compute_mrm(np.full((1, 1, 2), 64.0), min_sigma=min_sigma)
    return TrainingWindow(np.ascontiguousarray(frames, dtype=np.float32),
                          np.asarray(audio, dtype=np.float32),
                          np.asarray(cond, dtype=np.float32), clip.emotion, mrm, start)


class ClipStore:
    """Loads the clips of one manifest split and caches them in memory."""

    def __init__(self, manifest: Manifest, split: str = "train", cache: bool = True):
        self.manifest = manifest
        self.entries = manifest.split(split)
        self.split = split
        self._cache: dict[int, AlignedClip] = {}
        self.cache = cache

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> AlignedClip:
        if i in self._cache:
            return self._cache[i]
        clip = load_aligned_clip(self.manifest.path(self.entries[i]))
        if self.cache:
            self._cache[i] = clip
        return clip
