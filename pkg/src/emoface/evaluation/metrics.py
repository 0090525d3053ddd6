"""Image-quality and lip-sync metrics against ground-truth video.

Frames are compared on the 8-bit scale: float inputs in [-1, 1] are mapped
with ``round((x + 1) * 127.5)`` first, uint8 inputs are used as-is.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from emoface.data.align import key_points
from emoface.data.clips import denormalize_pixels

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_WIN = 11
LANDMARK_FAILURE_FLAG = 0.2


def to_uint8_scale(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float64)
    return denormalize_pixels(frames).astype(np.float64)


def _frames(x) -> np.ndarray:
    x = to_uint8_scale(x)
    if x.ndim == 3:
        x = x[None]
    return x


def psnr_frames(a, b) -> np.ndarray:
    """Per-frame PSNR in dB with peak 255; identical frames give ``PSNR_CAP``."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    out = np.full(len(a), PSNR_CAP)
    nz = mse > 0
    out[nz] = np.minimum(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse[nz]))
    return out


def psnr(a, b) -> float:
    return float(psnr_frames(a, b).mean())


def _ssim_frame(x: np.ndarray, y: np.ndarray) -> float:
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    truncate = ((SSIM_WIN - 1) // 2) / SSIM_SIGMA
    pad = (SSIM_WIN - 1) // 2

    def blur(img):
        return gaussian_filter(img, SSIM_SIGMA, truncate=truncate, mode="reflect")

    values = []
    for c in range(x.shape[-1]):
        xc, yc = x[..., c], y[..., c]
        mx, my = blur(xc), blur(yc)
        sxx = blur(xc * xc) - mx * mx
        syy = blur(yc * yc) - my * my
        sxy = blur(xc * yc) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        smap = num / den
        values.append(smap[pad:-pad, pad:-pad].mean())
    return float(np.mean(values))


def ssim_frames(a, b) -> np.ndarray:
    """Per-frame SSIM: 11x11 Gaussian window (sigma 1.5), channel mean, border cropped."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[1:3]) < SSIM_WIN:
        raise ValueError(f"frames smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    if a.ndim == 3:
        a, b = a[..., None], b[..., None]
    return np.array([_ssim_frame(x, y) for x, y in zip(a, b)])


def ssim(a, b) -> float:
    return float(ssim_frames(a, b).mean())


def interocular_normalizer(landmarks) -> np.ndarray:
    lm = np.asarray(landmarks, dtype=np.float64)
    eyes = np.stack([key_points(f)[:2] for f in lm])
    return np.linalg.norm(eyes[:, 1] - eyes[:, 0], axis=1)


def nlmd(landmarks_gen, landmarks_gt, return_details: bool = False):
    """Mean landmark distance over frames and points, divided per frame by the
    ground truth's inter-ocular distance.

    Frames where either set is missing (NaN) are dropped pairwise.
    """
    g = np.asarray(landmarks_gen, dtype=np.float64)
    t = np.asarray(landmarks_gt, dtype=np.float64)
    if g.ndim == 2:
        g, t = g[None], t[None]
    if g.shape != t.shape or g.shape[1:] != (68, 2):
        raise ValueError(f"expected matching T x 68 x 2 landmarks, got {g.shape} and {t.shape}")
    ok = np.isfinite(g).all(axis=(1, 2)) & np.isfinite(t).all(axis=(1, 2))
    if not ok.any():
        raise ValueError("no frames with landmarks in both videos")
    norm = interocular_normalizer(t[ok])
    dist = np.linalg.norm(g[ok] - t[ok], axis=2).mean(axis=1) / norm
    value = float(dist.mean())
    if return_details:
        return value, {"frames_used": int(ok.sum()), "frames_dropped": int((~ok).sum()),
                       "failure_rate": float((~ok).mean())}
    return value


@dataclass
class ClipMetrics:
    name: str
    psnr: float
    ssim: float
    nlmd: float
    landmark_failure_rate: float = 0.0
    flagged: bool = False


@dataclass
class MetricReport:
    clips: list[ClipMetrics] = field(default_factory=list)
    metadata: dict = field(default_factory=lambda: {
        "psnr_peak": 255, "psnr_cap_db": PSNR_CAP,
        "ssim": "gaussian 11x11 sigma=1.5, C1=(0.01*255)^2, C2=(0.03*255)^2, channel mean",
        "nlmd_normalizer": "per-frame inter-ocular distance of ground truth",
        "denormalization": "round((x+1)*127.5)",
    })

    @property
    def psnr(self) -> float:
        return float(np.mean([c.psnr for c in self.clips])) if self.clips else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([c.ssim for c in self.clips])) if self.clips else float("nan")

    @property
    def nlmd(self) -> float:
        vals = [c.nlmd for c in self.clips if np.isfinite(c.nlmd)]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "nlmd": self.nlmd, "clips": len(self.clips),
                "flagged": sum(c.flagged for c in self.clips)}

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["clip", "psnr", "ssim", "nlmd", "landmark_failure_rate", "flagged"])
            for c in self.clips:
                writer.writerow([c.name, f"{c.psnr:.6f}", f"{c.ssim:.6f}", f"{c.nlmd:.6f}",
                                 f"{c.landmark_failure_rate:.4f}", int(c.flagged)])
            writer.writerow(["MEAN", f"{self.psnr:.6f}", f"{self.ssim:.6f}", f"{self.nlmd:.6f}", "", ""])
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps({"summary": self.summary(), "metadata": self.metadata,
                                         "clips": [asdict(c) for c in self.clips]}, indent=2))
        return csv_path, json_path


def evaluate_clip(name, gen_frames, gt_frames, gen_landmarks=None, gt_landmarks=None) -> ClipMetrics:
    p = psnr(gen_frames, gt_frames)
    s = ssim(gen_frames, gt_frames)
    n, fail = float("nan"), float("nan")
    if gen_landmarks is not None and gt_landmarks is not None:
        try:
            n, details = nlmd(gen_landmarks, gt_landmarks, return_details=True)
            fail = details["failure_rate"]
        except ValueError as exc:
            log.warning("%s: NLMD unavailable: %s", name, exc)
            fail = 1.0
    flagged = bool(np.isfinite(fail) and fail > LANDMARK_FAILURE_FLAG)
    if flagged:
        log.warning("%s: landmark detection failed on %.0f%% of frames", name, 100 * fail)
    return ClipMetrics(str(name), p, s, n, 0.0 if not np.isfinite(fail) else fail, flagged)
