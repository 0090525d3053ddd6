"""Photometric augmentation applied identically to every frame of a window.

Parameters are drawn once per window from a seeded generator, so the same
seed always yields the same output and frames stay mutually consistent.
Nothing here touches geometry, frame count, audio or the emotion label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np


@dataclass
class AugmentConfig:
    # probability that each op is applied to a window
    p_brightness_contrast: float = 0.5
    p_gamma: float = 0.5
    p_hsv: float = 0.5
    p_clahe: float = 0.1
    p_noise: float = 0.2
    p_channel_shuffle: float = 0.05
    p_rgb_shift: float = 0.3
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    gamma_limit: tuple = (80, 120)
    hue_shift: float = 10.0          # degrees on OpenCV's 0-180 hue scale
    sat_shift: float = 20.0
    val_shift: float = 20.0
    clahe_clip: float = 4.0
    noise_var: tuple = (10.0, 50.0)  # on the 0-255 scale
    rgb_shift: float = 15.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(**{name: 0.0 for name in cls.__dataclass_fields__ if name.startswith("p_")})


@dataclass
class AugmentParams:
    brightness: float | None = None
    contrast: float | None = None
    gamma: float | None = None
    hsv: tuple | None = None
    clahe: float | None = None
    noise_seed: int | None = None
    noise_std: float | None = None
    permutation: tuple | None = None
    rgb: tuple | None = None
    ops: list = field(default_factory=list)

    @property
    def is_identity(self) -> bool:
        return not self.ops


def sample_params(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    """Draw one set of augmentation parameters.

    Every random draw happens unconditionally so that toggling one op's
    probability never shifts another op's parameters.
    """
    u = rng.random(7)
    brightness = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
    contrast = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
    gamma = rng.uniform(*cfg.gamma_limit) / 100.0
    hsv = (rng.uniform(-cfg.hue_shift, cfg.hue_shift), rng.uniform(-cfg.sat_shift, cfg.sat_shift),
           rng.uniform(-cfg.val_shift, cfg.val_shift))
    clahe = rng.uniform(1.0, cfg.clahe_clip)
    noise_std = float(np.sqrt(rng.uniform(*cfg.noise_var)))
    noise_seed = int(rng.integers(0, 2**31 - 1))
    permutation = tuple(int(i) for i in rng.permutation(3))
    rgb = tuple(rng.uniform(-cfg.rgb_shift, cfg.rgb_shift, size=3))

    p = AugmentParams()
    if u[0] < cfg.p_brightness_contrast:
        p.brightness, p.contrast = brightness, contrast
        p.ops.append("brightness_contrast")
    if u[1] < cfg.p_gamma:
        p.gamma = gamma
        p.ops.append("gamma")
    if u[2] < cfg.p_hsv:
        p.hsv = hsv
        p.ops.append("hsv")
    if u[3] < cfg.p_clahe:
        p.clahe = clahe
        p.ops.append("clahe")
    if u[4] < cfg.p_noise:
        p.noise_std, p.noise_seed = noise_std, noise_seed
        p.ops.append("noise")
    if u[5] < cfg.p_channel_shuffle:
        p.permutation = permutation
        p.ops.append("channel_shuffle")
    if u[6] < cfg.p_rgb_shift:
        p.rgb = rgb
        p.ops.append("rgb_shift")
    return p


def _clahe(img: np.ndarray, clip: float) -> np.ndarray:
    op = cv2.createCLAHE(clipLimit=clip, tileGridSize=(8, 8))
    lab = cv2.cvtColor(img, cv2.COLOR_RGB2LAB)
    lab[..., 0] = op.apply(lab[..., 0])
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def _hsv(img: np.ndarray, shifts) -> np.ndarray:
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV).astype(np.float32)
    hsv[..., 0] = np.mod(hsv[..., 0] + shifts[0], 180.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + shifts[1], 0, 255)
    hsv[..., 2] = np.clip(hsv[..., 2] + shifts[2], 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def apply_params(frames, params: AugmentParams) -> np.ndarray:
    """Apply ``params`` to ``T x H x W x 3`` frames in [-1, 1]."""
    frames = np.asarray(frames, dtype=np.float32)
    if params.is_identity:
        return frames.copy()
    x = (frames + 1.0) * 127.5
    if params.brightness is not None:
        x = x * params.contrast + params.brightness * 255.0
    if params.gamma is not None:
        x = 255.0 * np.power(np.clip(x, 0, 255) / 255.0, params.gamma)
    if params.hsv is not None or params.clahe is not None:
        u8 = np.clip(np.rint(x), 0, 255).astype(np.uint8)
        out = []
        for img in u8:
            if params.hsv is not None:
                img = _hsv(img, params.hsv)
            if params.clahe is not None:
                img = _clahe(img, params.clahe)
            out.append(img)
        x = np.stack(out).astype(np.float32)
    if params.noise_std is not None:
        # one noise field shared by all frames keeps the window consistent
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_std, x.shape[1:])
        x = x + noise.astype(np.float32)
    if params.permutation is not None:
        x = x[..., list(params.permutation)]
    if params.rgb is not None:
        x = x + np.asarray(params.rgb, dtype=np.float32)
    return np.clip(x / 127.5 - 1.0, -1.0, 1.0).astype(np.float32)


def augment(frames, rng_seed, cfg: AugmentConfig | None = None) -> np.ndarray:
    cfg = cfg or AugmentConfig()
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return apply_params(frames, sample_params(rng, cfg))
