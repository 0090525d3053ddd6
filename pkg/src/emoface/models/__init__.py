from emoface.models.discriminators import EmotionDiscriminator, FrameCritic
from emoface.models.generator import Generator, generate

__all__ = ["EmotionDiscriminator", "FrameCritic", "Generator", "generate"]
