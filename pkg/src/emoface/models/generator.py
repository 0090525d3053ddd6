"""Speech + image + emotion + noise -> talking-face video.

Tensors are channels-first inside the networks: images ``N x 3 x 128 x 128``,
videos ``N x T x 3 x 128 x 128``, audio ``N x samples``.  The numpy-facing
``generate`` helper takes and returns channels-last arrays.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from emoface.config import ModelConfig
from emoface.emotions import NUM_EMOTIONS, SAMPLES_PER_FRAME, emotion_index

log = logging.getLogger(__name__)

SLOPE = 0.2


def lrelu(x):
    return F.leaky_relu(x, SLOPE)


def trim_audio(audio: torch.Tensor, multiple: int = SAMPLES_PER_FRAME) -> tuple[torch.Tensor, int]:
    """Drop a trailing partial frame so the length is a whole number of video frames."""
    n = audio.shape[-1]
    if n < multiple:
        raise ValueError(f"audio has {n} samples, shorter than one frame ({multiple})")
    extra = n % multiple
    return (audio[..., :n - extra] if extra else audio), extra


class SpeechEncoder(nn.Module):
    """1-D conv stack at 125 steps/s, context concat + decimation to 25 steps/s, FC, LSTMs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers = []
        cin = 1
        for filters, kernel, stride in cfg.speech_convs:
            layers.append(nn.Conv1d(cin, filters, kernel, stride, padding=kernel // 2))
            cin = filters
        self.convs = nn.ModuleList(layers)
        if SAMPLES_PER_FRAME % cfg.speech_stride:
            raise ValueError("conv stride product must divide 320 samples")
        self.decimation = SAMPLES_PER_FRAME // cfg.speech_stride
        self.context = cfg.speech_context
        self.fc = nn.Linear(cin * (2 * self.context + 1), cfg.speech_fc)
        self.lstm = nn.LSTM(cfg.speech_fc, cfg.speech_hidden, cfg.speech_lstm_layers, batch_first=True)
        self.out_dim = cfg.speech_hidden

    def conv_features(self, audio: torch.Tensor) -> torch.Tensor:
        x = audio.unsqueeze(1)
        for conv in self.convs:
            x = lrelu(conv(x))
        return x  # N x C x (samples / stride)

    def context_layer(self, feats: torch.Tensor, num_frames: int) -> torch.Tensor:
        """Concatenate +-context neighbours around the centre of each block, keep one per block."""
        n, c, length = feats.shape
        r = self.context
        padded = F.pad(feats, (r, r))
        centres = torch.arange(num_frames, device=feats.device) * self.decimation + self.decimation // 2
        centres = centres.clamp(max=length - 1)
        offsets = torch.arange(-r, r + 1, device=feats.device)
        idx = centres[:, None] + offsets[None, :] + r  # frames x (2r + 1)
        gathered = padded[:, :, idx]                   # N x C x frames x (2r + 1)
        return gathered.permute(0, 2, 3, 1).reshape(n, num_frames, (2 * r + 1) * c)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        audio, _ = trim_audio(audio)
        num_frames = audio.shape[-1] // SAMPLES_PER_FRAME
        x = self.context_layer(self.conv_features(audio), num_frames)
        x = lrelu(self.fc(x))
        out, _ = self.lstm(x)
        return out  # N x T x hidden


class ImageEncoder(nn.Module):
    """Five (conv, nearest-neighbour /2) stages then a 4x4 valid conv to a 1x1 bottleneck."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.image_channels
        cin = 3
        self.convs = nn.ModuleList()
        for cout in chans[:5]:
            self.convs.append(nn.Conv2d(cin, cout, 3, padding=1))
            cin = cout
        self.bottleneck = nn.Conv2d(cin, chans[5], 4)
        self.out_dim = chans[5]
        self.skip_channels = chans[:5]

    def forward(self, image: torch.Tensor):
        if image.shape[-3:] != (3, 128, 128):
            raise ValueError(f"condition image must be 3x128x128, got {tuple(image.shape[-3:])}")
        skips = []
        x = image
        for conv in self.convs:
            x = lrelu(conv(x))
            x = F.interpolate(x, scale_factor=0.5, mode="nearest")
            skips.append(x)
        z = lrelu(self.bottleneck(x))
        return z.flatten(1), skips  # skips at 64, 32, 16, 8, 4


class EmotionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h1, h2 = cfg.emotion_hidden
        self.fc1 = nn.Linear(NUM_EMOTIONS, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.out_dim = h2

    def forward(self, emotion: torch.Tensor, num_frames: int) -> torch.Tensor:
        """``emotion`` is N class indices or an N x 6 (one-hot) float tensor."""
        if emotion.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
            if emotion.numel() and (emotion.min() < 0 or emotion.max() >= NUM_EMOTIONS):
                raise ValueError("emotion label out of range")
            emotion = F.one_hot(emotion.long(), NUM_EMOTIONS).to(self.fc1.weight.dtype)
        e = lrelu(self.fc2(lrelu(self.fc1(emotion))))
        return e.unsqueeze(1).expand(-1, num_frames, -1)


class NoiseEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.noise_dim = cfg.noise_dim
        self.lstm = nn.LSTM(cfg.noise_dim, cfg.noise_hidden, batch_first=True)
        self.out_dim = cfg.noise_hidden

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape[-1] != self.noise_dim:
            raise ValueError(f"noise width {noise.shape[-1]} != {self.noise_dim}")
        out, _ = self.lstm(noise)
        return out


class VideoDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, in_dim: int, skip_channels):
        super().__init__()
        self.base = cfg.image_channels[5]
        self.fc1 = nn.Linear(in_dim, cfg.decoder_fc)
        self.fc2 = nn.Linear(cfg.decoder_fc, self.base * 16)
        # skips consumed at 4, 8, 16, 32, 64; the 128 stage has none
        skips = list(reversed(skip_channels)) + [0]
        self.convs = nn.ModuleList()
        cin = self.base
        for cout, skip in zip(cfg.decoder_channels, skips):
            self.convs.append(nn.Conv2d(cin + skip, cout, 3, padding=1))
            cin = cout
        self.out = nn.Conv2d(cin, 3, 3, padding=1)

    def forward(self, emb: torch.Tensor, skips) -> torch.Tensor:
        n, t, _ = emb.shape
        x = lrelu(self.fc2(lrelu(self.fc1(emb.reshape(n * t, -1)))))
        x = x.view(n * t, self.base, 4, 4)
        ordered = list(reversed(skips))
        for i, conv in enumerate(self.convs):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i < len(ordered):
                s = ordered[i]
                s = s.unsqueeze(1).expand(-1, t, -1, -1, -1).reshape(n * t, *s.shape[1:])
                x = torch.cat([x, s], dim=1)
            x = lrelu(conv(x))
        x = torch.tanh(self.out(x))
        return x.view(n, t, 3, x.shape[-2], x.shape[-1])


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.speech = SpeechEncoder(self.cfg)
        self.image = ImageEncoder(self.cfg)
        self.emotion = EmotionEncoder(self.cfg)
        self.noise = NoiseEncoder(self.cfg)
        in_dim = self.speech.out_dim + self.image.out_dim + self.emotion.out_dim + self.noise.out_dim
        self.decoder = VideoDecoder(self.cfg, in_dim, self.image.skip_channels)

    def num_frames(self, num_samples: int) -> int:
        return num_samples // SAMPLES_PER_FRAME

    def sample_noise(self, batch: int, num_frames: int, generator: torch.Generator | None = None):
        p = next(self.parameters())
        return torch.randn(batch, num_frames, self.cfg.noise_dim, generator=generator,
                           dtype=p.dtype).to(p.device)

    def forward(self, audio, image, emotion, noise=None, skips_override=None):
        speech = self.speech(audio)
        t = speech.shape[1]
        z_img, skips = self.image(image)
        if skips_override is not None:
            skips = skips_override(skips)
        emo = self.emotion(emotion, t)
        if noise is None:
            noise = self.sample_noise(audio.shape[0], t)
        if noise.shape[1] != t:
            raise ValueError(f"noise has {noise.shape[1]} steps, speech has {t}")
        noise_emb = self.noise(noise)
        emb = torch.cat([speech, z_img.unsqueeze(1).expand(-1, t, -1), noise_emb, emo], dim=-1)
        return self.decoder(emb, skips)


@torch.no_grad()
def generate(model: Generator, audio, condition_image, emotion, noise_seed: int = 0) -> np.ndarray:
    """Generate ``T x 128 x 128 x 3`` frames in [-1, 1] from numpy inputs.

    ``audio`` is an 8 kHz waveform giving ``floor(len(audio) / 320)`` frames;
    a trailing partial frame is dropped.  ``condition_image`` is
    ``128 x 128 x 3`` in [-1, 1].
    """
    model.eval()
    p = next(model.parameters())
    audio_t = torch.as_tensor(np.asarray(audio, dtype=np.float32), dtype=p.dtype).reshape(1, -1)
    audio_t, extra = trim_audio(audio_t)
    if extra:
        log.info("dropping %d trailing samples (partial frame)", extra)
    image = np.asarray(condition_image, dtype=np.float32)
    if image.shape != (128, 128, 3):
        raise ValueError(f"condition image must be 128x128x3, got {image.shape}")
    image_t = torch.as_tensor(image, dtype=p.dtype).permute(2, 0, 1).unsqueeze(0)
    label = torch.tensor([emotion_index(emotion)])
    t = model.num_frames(audio_t.shape[-1])
    gen = torch.Generator().manual_seed(int(noise_seed))
    noise = model.sample_noise(1, t, gen)
    video = model(audio_t.to(p.device), image_t.to(p.device), label.to(p.device), noise)
    return video[0].permute(0, 2, 3, 1).cpu().numpy()
