"""Clip containers and audio/video I/O.

An aligned clip lives in its own directory::

    <clip>/frames.npy      uint8  T x 128 x 128 x 3 (RGB, lossless)
    <clip>/audio.wav       16-bit PCM mono, 8 kHz
    <clip>/landmarks.npy   float32 T x 68 x 2, aligned pixel coordinates
    <clip>/meta.json       actor, sentence, emotion, source fps / rate
"""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
import tempfile
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from emoface.emotions import SAMPLE_RATE, SAMPLES_PER_FRAME, VIDEO_FPS, emotion_name

log = logging.getLogger(__name__)


@dataclass
class RawClip:
    video_frames: np.ndarray          # T_raw x H x W x 3 uint8 RGB
    fps_raw: float
    audio: np.ndarray                 # float waveform, mono
    sample_rate_raw: int
    actor_id: str
    sentence_id: str
    emotion: str
    landmarks: np.ndarray | None = None  # optional precomputed T_raw x 68 x 2 (NaN = failure)
    name: str = ""

    def __post_init__(self):
        self.emotion = emotion_name(self.emotion)
        if len(self.video_frames) < 1:
            raise ValueError("raw clip has no frames")

    @property
    def duration(self) -> float:
        return len(self.video_frames) / self.fps_raw


@dataclass
class AlignedClip:
    video_frames: np.ndarray          # T x 128 x 128 x 3 float32 in [-1, 1]
    audio: np.ndarray                 # float32 at 8 kHz, length T * 320
    landmarks: np.ndarray             # T x 68 x 2
    emotion: str
    actor_id: str = ""
    sentence_id: str = ""
    fps: int = VIDEO_FPS
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.emotion = emotion_name(self.emotion)
        if self.fps != VIDEO_FPS or self.sample_rate != SAMPLE_RATE:
            raise ValueError("aligned clips are 25 FPS / 8 kHz")
        if abs(len(self.audio) - SAMPLES_PER_FRAME * len(self.video_frames)) > SAMPLES_PER_FRAME:
            raise ValueError("audio and video lengths disagree by more than one frame")

    @property
    def num_frames(self) -> int:
        return len(self.video_frames)


def normalize_pixels(frames) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / 127.5 - 1.0


def denormalize_pixels(frames) -> np.ndarray:
    """[-1, 1] floats to uint8, ``round((x + 1) * 127.5)``."""
    x = np.clip(np.asarray(frames, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


# --- audio -----------------------------------------------------------------

def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM wav file as float32 mono in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        rate = wf.getframerate()
        width = wf.getsampwidth()
        channels = wf.getnchannels()
        raw = wf.readframes(wf.getnframes())
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float32) / 2147483648.0
    elif width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    else:
        raise ValueError(f"unsupported sample width {width} in {path}")
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return data, rate


def write_wav(path, audio, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(audio, dtype=np.float64) * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.astype("<i2").tobytes())


def resample_audio(audio, rate_in: int, rate_out: int = SAMPLE_RATE) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    if rate_in == rate_out:
        return audio.astype(np.float32)
    ratio = Fraction(int(rate_out), int(rate_in))
    out = resample_poly(audio, ratio.numerator, ratio.denominator)
    expected = int(round(len(audio) * rate_out / rate_in))
    return out[:expected].astype(np.float32)


def normalize_amplitude(audio, peak: float = 0.95) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float32)
    top = float(np.max(np.abs(audio))) if audio.size else 0.0
    if top < 1e-8:
        return audio
    return (audio * (peak / top)).astype(np.float32)


def load_audio(path, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Decode any wav to mono ``rate`` Hz, amplitude-normalized."""
    data, sr = read_wav(path)
    return normalize_amplitude(resample_audio(data, sr, rate))


# --- raw video ---------------------------------------------------------------

def ffmpeg_exe() -> str | None:
    found = shutil.which("ffmpeg")
    if found:
        return found
    try:
        import imageio_ffmpeg
    except ImportError:
        return None
    return imageio_ffmpeg.get_ffmpeg_exe()


def read_video_frames(path) -> tuple[np.ndarray, float]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise OSError(f"cannot open video {path}")
    fps = cap.get(cv2.CAP_PROP_FPS) or 0.0
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise OSError(f"no decodable frames in {path}")
    if fps <= 0:
        raise OSError(f"unknown frame rate for {path}")
    return np.stack(frames), float(fps)


def extract_audio(video_path) -> tuple[np.ndarray, int]:
    exe = ffmpeg_exe()
    if exe is None:
        raise OSError(f"no audio sidecar for {video_path} and ffmpeg is unavailable")
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "audio.wav"
        proc = subprocess.run([exe, "-y", "-loglevel", "error", "-i", str(video_path),
                               "-vn", "-ac", "1", "-acodec", "pcm_s16le", str(out)],
                              capture_output=True)
        if proc.returncode != 0 or not out.exists():
            raise OSError(f"ffmpeg could not extract audio from {video_path}: "
                          f"{proc.stderr.decode(errors='replace').strip()}")
        return read_wav(out)


def parse_clip_name(name: str) -> tuple[str, str, str]:
    """``1001_DFA_ANG_XX`` -> (actor, sentence, emotion).

    Also accepts ``<actor>_<sentence>_<emotion name>[_...]``.
    """
    parts = Path(name).name.split(".")[0].split("_")
    if len(parts) < 3:
        raise ValueError(f"cannot parse actor/sentence/emotion from {name!r}")
    return parts[0], parts[1], emotion_name(parts[2])


def read_raw_clip(video_path, audio_dir=None, landmarks_dir=None) -> RawClip:
    """Load a raw recording plus optional audio and landmark sidecars.

    Audio is read from ``<stem>.wav`` next to the video (or in ``audio_dir``)
    and extracted with ffmpeg otherwise. Landmarks come from
    ``<stem>.landmarks.npy`` when present.
    """
    video_path = Path(video_path)
    stem = video_path.stem
    actor, sentence, emotion = parse_clip_name(stem)
    frames, fps = read_video_frames(video_path)
    wav = Path(audio_dir or video_path.parent) / f"{stem}.wav"
    if wav.exists():
        audio, rate = read_wav(wav)
    else:
        audio, rate = extract_audio(video_path)
    landmarks = None
    sidecar = Path(landmarks_dir or video_path.parent) / f"{stem}.landmarks.npy"
    if sidecar.exists():
        landmarks = np.load(sidecar)
    return RawClip(frames, fps, audio, rate, actor, sentence, emotion, landmarks, name=stem)


# --- aligned container -------------------------------------------------------

def save_aligned_clip(clip: AlignedClip, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "frames.npy", denormalize_pixels(clip.video_frames))
    np.save(directory / "landmarks.npy", np.asarray(clip.landmarks, dtype=np.float32))
    write_wav(directory / "audio.wav", clip.audio, clip.sample_rate)
    meta = {"actor_id": clip.actor_id, "sentence_id": clip.sentence_id,
            "emotion": clip.emotion, "fps": clip.fps, "sample_rate": clip.sample_rate,
            **clip.meta}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_aligned_clip(directory) -> AlignedClip:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    frames = normalize_pixels(np.load(directory / "frames.npy"))
    audio, rate = read_wav(directory / "audio.wav")
    if rate != SAMPLE_RATE:
        raise ValueError(f"{directory}: audio must be {SAMPLE_RATE} Hz, found {rate}")
    lm_path = directory / "landmarks.npy"
    landmarks = np.load(lm_path) if lm_path.exists() else np.full((len(frames), 68, 2), np.nan)
    extra = {k: v for k, v in meta.items()
             if k not in ("actor_id", "sentence_id", "emotion", "fps", "sample_rate")}
    return AlignedClip(frames, audio, landmarks, meta["emotion"], meta.get("actor_id", ""),
                       meta.get("sentence_id", ""), meta.get("fps", VIDEO_FPS), rate, extra)
