from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from emoface.config import ModelConfig
from emoface.emotions import NUM_EMOTIONS
from emoface.models.generator import lrelu


class FrameTrunk(nn.Module):
    """Five stride-2 3x3 convs (128 -> 4) followed by fully connected layers.

    No normalization layers: the critic's gradient penalty is per sample.
    """

    def __init__(self, in_channels: int, channels, fc_widths, final_activation: bool):
        super().__init__()
        self.convs = nn.ModuleList()
        cin = in_channels
        for cout in channels:
            self.convs.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            cin = cout
        self.fcs = nn.ModuleList()
        width = cin * 4 * 4
        for w in fc_widths:
            self.fcs.append(nn.Linear(width, w))
            width = w
        self.final_activation = final_activation
        self.out_dim = width

    def conv_features(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = lrelu(conv(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv_features(x).flatten(1)
        last = len(self.fcs) - 1
        for i, fc in enumerate(self.fcs):
            x = fc(x)
            if i < last or self.final_activation:
                x = lrelu(x)
        return x


class FrameCritic(nn.Module):
    """Per-frame WGAN critic conditioned on the identity image by channel concat."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.trunk = FrameTrunk(6, cfg.critic_channels, (cfg.critic_fc, 1), final_activation=False)

    def forward(self, frames: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        """``frames`` N x T x 3 x H x W, ``condition`` N x 3 x H x W -> N x T scores."""
        if frames.dim() != 5 or condition.dim() != 4 or frames.shape[2:] != condition.shape[1:]:
            raise ValueError(f"shape mismatch: frames {tuple(frames.shape)}, "
                             f"condition {tuple(condition.shape)}")
        n, t = frames.shape[:2]
        cond = condition.unsqueeze(1).expand(-1, t, -1, -1, -1)
        x = torch.cat([frames, cond], dim=2).reshape(n * t, 6, *frames.shape[-2:])
        return self.trunk(x).view(n, t)


class EmotionDiscriminator(nn.Module):
    """Frame trunk -> LSTM -> last step -> class logits.

    With ``num_classes=7`` the last class is "fake"; the evaluation
    classifier is the same network with ``num_classes=6``.
    """

    def __init__(self, cfg: ModelConfig | None = None, num_classes: int = NUM_EMOTIONS + 1):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.num_classes = num_classes
        self.trunk = FrameTrunk(3, cfg.critic_channels, cfg.emotion_fc, final_activation=True)
        self.lstm = nn.LSTM(self.trunk.out_dim, cfg.emotion_lstm, batch_first=True)
        self.head = nn.Linear(cfg.emotion_lstm, num_classes)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``frames`` N x T x 3 x H x W -> N x num_classes logits."""
        if frames.dim() != 5 or frames.shape[2] != 3 or frames.shape[1] < 1:
            raise ValueError(f"expected N x T x 3 x H x W frames, got {tuple(frames.shape)}")
        n, t = frames.shape[:2]
        feats = self.trunk(frames.reshape(n * t, *frames.shape[2:])).view(n, t, -1)
        out, _ = self.lstm(feats)
        return self.head(out[:, -1])

    def posterior(self, frames: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(frames), dim=-1)
