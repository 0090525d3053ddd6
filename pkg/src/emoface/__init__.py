"""Emotion-conditioned talking-face generation from speech and a single image."""

from emoface.emotions import EMOTIONS, FAKE_CLASS, emotion_index, emotion_name

__version__ = "0.1.0"

__all__ = ["EMOTIONS", "FAKE_CLASS", "emotion_index", "emotion_name", "__version__"]
