"""Emotion label encoding shared by every module.

Labels are indexed alphabetically; the emotion discriminator adds a seventh
"fake" class after the six real emotions.
"""

import numbers

EMOTIONS = ("anger", "disgust", "fear", "happiness", "neutral", "sadness")
NUM_EMOTIONS = len(EMOTIONS)
FAKE_CLASS = NUM_EMOTIONS

# three-letter codes used in CREMA-D file names
CREMA_CODES = {"ANG": "anger", "DIS": "disgust", "FEA": "fear",
               "HAP": "happiness", "NEU": "neutral", "SAD": "sadness"}

VIDEO_FPS = 25
SAMPLE_RATE = 8000
SAMPLES_PER_FRAME = SAMPLE_RATE // VIDEO_FPS  # 320
IMAGE_SIZE = 128


def emotion_index(label) -> int:
    """Return the class index for a name, CREMA-D code or integer label."""
    if isinstance(label, numbers.Integral) and not isinstance(label, bool):
        if 0 <= label < NUM_EMOTIONS:
            return int(label)
        raise ValueError(f"emotion index {label} out of range [0, {NUM_EMOTIONS - 1}]")
    name = str(label).strip()
    if name.upper() in CREMA_CODES:
        name = CREMA_CODES[name.upper()]
    name = name.lower()
    if name not in EMOTIONS:
        raise ValueError(f"unknown emotion {label!r}; expected one of {', '.join(EMOTIONS)}")
    return EMOTIONS.index(name)


def emotion_name(label) -> str:
    return EMOTIONS[emotion_index(label)]
