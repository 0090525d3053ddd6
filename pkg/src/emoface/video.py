"""Writing generated videos and reading frame directories back."""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from emoface.data.clips import denormalize_pixels, ffmpeg_exe, normalize_pixels, read_wav, write_wav
from emoface.emotions import SAMPLE_RATE, VIDEO_FPS

log = logging.getLogger(__name__)


def write_video(frames, path, audio=None, sample_rate: int = SAMPLE_RATE, fps: int = VIDEO_FPS) -> Path:
    """Encode uint8 or [-1, 1] frames to H.264 mp4, muxing ``audio`` when given.

    Falls back to OpenCV (no audio track) when ffmpeg is not available.
    """
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = denormalize_pixels(frames)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t, h, w, _ = frames.shape
    exe = ffmpeg_exe()
    if exe is None:
        import cv2

        log.warning("ffmpeg not found; writing %s without audio", path)
        writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), fps, (w, h))
        for f in frames:
            writer.write(cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
        writer.release()
        return path
    with tempfile.TemporaryDirectory() as tmp:
        cmd = [exe, "-y", "-loglevel", "error", "-f", "rawvideo", "-pix_fmt", "rgb24",
               "-s", f"{w}x{h}", "-r", str(fps), "-i", "pipe:0"]
        if audio is not None:
            wav = Path(tmp) / "audio.wav"
            write_wav(wav, audio, sample_rate)
            cmd += ["-i", str(wav), "-c:a", "aac", "-shortest"]
        cmd += ["-c:v", "libx264", "-pix_fmt", "yuv420p", "-threads", "1", str(path)]
        proc = subprocess.run(cmd, input=np.ascontiguousarray(frames).tobytes(), capture_output=True)
        if proc.returncode != 0:
            raise OSError(f"ffmpeg failed writing {path}: {proc.stderr.decode(errors='replace').strip()}")
    return path


def save_frames(frames, directory) -> Path:
    """Lossless PNG per frame: ``directory/00000.png`` ..."""
    import cv2

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = denormalize_pixels(frames)
    for i, f in enumerate(frames):
        cv2.imwrite(str(directory / f"{i:05d}.png"), cv2.cvtColor(f, cv2.COLOR_RGB2BGR))
    return directory


def save_generated(frames, audio, out_dir, name: str, meta: dict | None = None,
                   video: bool = True) -> Path:
    """Write ``<out>/<name>/`` (PNG frames, wav, meta.json) and ``<out>/<name>.mp4``."""
    out_dir = Path(out_dir)
    clip_dir = out_dir / name
    save_frames(frames, clip_dir / "frames")
    write_wav(clip_dir / "audio.wav", audio)
    (clip_dir / "meta.json").write_text(json.dumps({"fps": VIDEO_FPS, "sample_rate": SAMPLE_RATE,
                                                    "num_frames": int(len(frames)), **(meta or {})},
                                                   indent=2, sort_keys=True))
    if video:
        write_video(frames, out_dir / f"{name}.mp4", audio)
    return clip_dir


def load_frames(clip_dir) -> np.ndarray:
    """uint8 frames from ``frames.npy`` or a ``frames/`` PNG directory."""
    clip_dir = Path(clip_dir)
    if (clip_dir / "frames.npy").exists():
        return np.load(clip_dir / "frames.npy")
    pngs = sorted((clip_dir / "frames").glob("*.png"))
    if not pngs:
        raise FileNotFoundError(f"no frames in {clip_dir}")
    import cv2

    return np.stack([cv2.cvtColor(cv2.imread(str(p)), cv2.COLOR_BGR2RGB) for p in pngs])


def load_clip_dir(clip_dir) -> dict:
    """Frames, optional landmarks and metadata of a clip or generated-output directory."""
    clip_dir = Path(clip_dir)
    out = {"frames": load_frames(clip_dir), "landmarks": None, "meta": {}}
    if (clip_dir / "landmarks.npy").exists():
        out["landmarks"] = np.load(clip_dir / "landmarks.npy")
    if (clip_dir / "meta.json").exists():
        out["meta"] = json.loads((clip_dir / "meta.json").read_text())
    if (clip_dir / "audio.wav").exists():
        out["audio"] = read_wav(clip_dir / "audio.wav")[0]
    return out


def frames_as_float(frames) -> np.ndarray:
    return normalize_pixels(frames)
