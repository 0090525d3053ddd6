"""Declarative configuration for model topology, loss weights and training.

A config file is plain YAML with three optional sections::

    model:   {speech_hidden: 256, ...}
    weights: {alpha: 100.0, ...}
    train:   {iterations_init: 100000, ...}

Missing keys fall back to the defaults below, which are the published
hyperparameters wherever those exist.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # speech encoder: (filters, kernel, stride) per 1-D conv layer
    speech_convs: tuple = ((64, 63, 4), (128, 31, 4), (256, 17, 2), (512, 9, 2), (16, 1, 1))
    speech_context: int = 2
    speech_fc: int = 256
    speech_hidden: int = 256
    speech_lstm_layers: int = 2
    # image encoder filters; the last layer is the 4x4 valid bottleneck conv
    image_channels: tuple = (64, 128, 256, 512, 512, 512)
    emotion_hidden: tuple = (128, 128)
    noise_dim: int = 10
    noise_hidden: int = 10
    decoder_fc: int = 1024
    decoder_channels: tuple = (512, 512, 512, 256, 128, 64)
    critic_channels: tuple = (64, 128, 256, 512, 512)
    critic_fc: int = 512
    emotion_fc: tuple = (512, 256)
    emotion_lstm: int = 256
    image_size: int = 128

    def __post_init__(self):
        self.speech_convs = tuple(tuple(int(v) for v in layer) for layer in self.speech_convs)
        for name in ("image_channels", "emotion_hidden", "decoder_channels",
                     "critic_channels", "emotion_fc"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.image_channels) != 6:
            raise ConfigError("image_channels needs 6 entries")
        if len(self.decoder_channels) != 6:
            raise ConfigError("decoder_channels needs 6 entries")
        if len(self.critic_channels) != 5:
            raise ConfigError("critic_channels needs 5 entries")
        if self.image_size != 128:
            raise ConfigError("only 128x128 frames are supported")

    @property
    def speech_stride(self) -> int:
        out = 1
        for _, _, stride in self.speech_convs:
            out *= stride
        return out

    @classmethod
    def tiny(cls, scale: int = 16) -> "ModelConfig":
        """Width-reduced topology for tests and smoke runs."""
        def shrink(values, floor=2):
            return tuple(max(floor, v // scale) for v in values)

        return cls(
            speech_convs=tuple((max(2, f // scale), k, s) for f, k, s in cls.speech_convs),
            speech_fc=max(4, 256 // scale),
            speech_hidden=max(4, 256 // scale),
            image_channels=shrink(cls.image_channels),
            emotion_hidden=shrink(cls.emotion_hidden, 4),
            noise_dim=4,
            noise_hidden=4,
            decoder_fc=max(8, 1024 // scale),
            decoder_channels=shrink(cls.decoder_channels),
            critic_channels=shrink(cls.critic_channels),
            critic_fc=max(4, 512 // scale),
            emotion_fc=shrink(cls.emotion_fc, 4),
            emotion_lstm=max(4, 256 // scale),
        )


@dataclass
class LossWeights:
    alpha: float = 100.0     # MRM L1
    beta: float = 1.0        # perceptual
    gamma: float = 0.01      # frame GAN
    delta: float = 0.001     # emotion GAN
    gp_lambda: float = 10.0  # critic gradient penalty

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if value < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative, got {value}")
            setattr(self, f.name, value)


@dataclass
class TrainConfig:
    stage: str = "init"
    iterations_init: int = 100_000
    iterations_gan: int = 100_000
    adam_betas: tuple = (0.5, 0.99)
    lr_generator_init: float = 1e-4
    lr_generator_gan: float = 1e-5
    lr_discriminators: float = 1e-4
    batch_size_init: int = 8
    batch_size_gan: int = 4
    window_frames: int = 32
    grad_clip: float = 10.0
    log_every: int = 10
    val_every: int = 1000
    val_batches: int = 4
    sample_every: int = 5000
    checkpoint_every: int = 5000
    mrm_base: float = 0.1
    mrm_min_sigma: float = 8.0
    perceptual: str = "vgg19"          # "vgg19" | "stub" | "off" (off only in tests)
    vgg_weights: str = ""
    augment: bool = True
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.stage not in ("init", "gan"):
            raise ConfigError(f"stage must be 'init' or 'gan', got {self.stage!r}")
        for name in ("iterations_init", "iterations_gan", "batch_size_init",
                     "batch_size_gan", "window_frames"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr_generator_init", "lr_generator_gan", "lr_discriminators"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.perceptual not in ("vgg19", "stub", "off"):
            raise ConfigError(f"unknown perceptual extractor {self.perceptual!r}")

    @property
    def iterations(self) -> int:
        return self.iterations_init if self.stage == "init" else self.iterations_gan

    @property
    def batch_size(self) -> int:
        return self.batch_size_init if self.stage == "init" else self.batch_size_gan

    @property
    def lr_generator(self) -> float:
        return self.lr_generator_init if self.stage == "init" else self.lr_generator_gan


def to_dict(obj) -> dict:
    return _plain(dataclasses.asdict(obj))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return cls(**values)


def model_config_from_dict(values: dict) -> ModelConfig:
    return _build(ModelConfig, dict(values))


def train_config_from_dict(values: dict) -> TrainConfig:
    values = dict(values)
    if "weights" in values:
        values["weights"] = _build(LossWeights, values["weights"])
    return _build(TrainConfig, values)


def load_config(path: str | Path | None, overrides: list[str] | None = None):
    """Read a YAML config and apply ``section.key=value`` overrides.

    Returns ``(ModelConfig, TrainConfig)``.
    """
    data: dict[str, Any] = {}
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    unknown = set(data) - {"model", "train", "weights"}
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    model = dict(data.get("model") or {})
    train = dict(data.get("train") or {})
    weights = dict(data.get("weights") or {})
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        section, _, name = key.partition(".")
        if not name:
            section, name = "train", section
        target = {"model": model, "train": train, "weights": weights}.get(section)
        if target is None:
            raise ConfigError(f"unknown config section in override {item!r}")
        target[name] = value
    if weights:
        train["weights"] = {**train.get("weights", {}), **weights}
    return model_config_from_dict(model), train_config_from_dict(train)


def dump_config(model: ModelConfig, train: TrainConfig, path: str | Path) -> None:
    train_dict = to_dict(train)
    weights = train_dict.pop("weights")
    with open(path, "w") as fh:
        yaml.safe_dump({"model": to_dict(model), "train": train_dict, "weights": weights},
                       fh, sort_keys=False)


def config_diff(expected: dict, actual: dict) -> list[str]:
    """Keys whose values differ between two flat-ish config dicts."""
    keys = sorted(set(expected) | set(actual))
    return [f"{k}: {expected.get(k)!r} != {actual.get(k)!r}"
            for k in keys if expected.get(k) != actual.get(k)]
