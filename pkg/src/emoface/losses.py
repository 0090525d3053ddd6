"""Training objectives: mouth-weighted L1, perceptual, WGAN-GP and emotion GAN losses."""

from __future__ import annotations

import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from emoface.config import LossWeights
from emoface.emotions import FAKE_CLASS, NUM_EMOTIONS

# torchvision VGG-19 "features" layout; "M" is a max-pool
VGG19_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                512, 512, 512, 512, "M", 512, 512, 512, 512, "M")
# end indices (exclusive) into the feature stack: relu1_2, relu2_2, relu3_4, relu4_4, relu5_4
PERCEPTUAL_TAPS = (4, 9, 18, 27, 36)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value=None):
        super().__init__(f"non-finite loss term {term!r} ({value})")
        self.term = term


class ExtractorUnavailable(RuntimeError):
    pass


def mrm_l1(gen: torch.Tensor, gt: torch.Tensor, weights, base: float = 0.1) -> torch.Tensor:
    """Mean of ``weight(p) * |gen - gt|`` over frames, pixels and channels.

    ``weights`` is an ``H x W`` map (shared) or ``N x H x W`` (per sample)
    and broadcasts over the frame and channel axes of ``N x T x C x H x W``
    videos.  A ``MouthRegionMask`` is turned into ``base + (1 - base) * gaussian``.
    """
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(gen.shape)} vs {tuple(gt.shape)}")
    if hasattr(weights, "loss_weights"):
        weights = weights.loss_weights(base)
    w = torch.as_tensor(weights, dtype=gen.dtype, device=gen.device)
    if w.shape[-2:] != gen.shape[-2:]:
        raise ValueError(f"mask {tuple(w.shape)} does not match frames {tuple(gen.shape[-2:])}")
    if w.dim() == 3 and gen.dim() == 5:
        w = w[:, None, None]
    return (w * (gen - gt).abs()).mean()


def vgg19_layers(widths=VGG19_LAYOUT) -> nn.Sequential:
    layers: list[nn.Module] = []
    cin = 3
    for w in widths:
        if w == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(cin, w, 3, padding=1), nn.ReLU(inplace=False)]
            cin = w
    return nn.Sequential(*layers)


def stub_extractor(width: int = 4, seed: int = 0) -> nn.Sequential:
    """Randomly initialised, narrow network with the VGG-19 feature layout.

    Tap indices mean the same thing as in the real extractor; used where
    pretrained weights are unavailable (tests, smoke runs).
    """
    widths = tuple(w if w == "M" else max(1, width * w // 64) for w in VGG19_LAYOUT)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = vgg19_layers(widths)
    finally:
        torch.random.set_rng_state(state)
    return net


def vgg19_extractor(weights_path: str | Path | None = None) -> nn.Sequential:
    """Pretrained VGG-19 feature stack.

    ``weights_path`` may hold a full torchvision VGG-19 state dict or just the
    ``features`` part; without it torchvision's cached ImageNet weights are
    used when present.
    """
    net = vgg19_layers()
    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        if any(k.startswith("features.") for k in state):
            state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        net.load_state_dict(state)
        return net
    try:
        from torchvision.models import VGG19_Weights, vgg19

        return vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    except Exception as exc:
        raise ExtractorUnavailable(
            "pretrained VGG-19 weights are not available; pass a weights file "
            "(train.vgg_weights) or use the stub extractor only for tests") from exc


class PerceptualLoss(nn.Module):
    """Sum over taps of the feature MSE between generated and real frames."""

    def __init__(self, extractor: nn.Sequential, taps=PERCEPTUAL_TAPS, normalize: bool = True):
        super().__init__()
        taps = tuple(sorted(taps))
        if taps[-1] > len(extractor):
            raise ValueError(f"tap {taps[-1]} beyond a {len(extractor)}-layer extractor")
        self.extractor = extractor[:taps[-1]].eval()
        for p in self.extractor.parameters():
            p.requires_grad_(False)
        self.taps = taps
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def train(self, mode: bool = True):
        super().train(mode)
        self.extractor.eval()
        return self

    def features(self, frames: torch.Tensor) -> list[torch.Tensor]:
        x = frames.reshape(-1, *frames.shape[-3:])
        if self.normalize:
            x = ((x + 1.0) / 2.0 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.extractor, start=1):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats

    def forward(self, gen: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
        if gen.shape != gt.shape:
            raise ValueError(f"shape mismatch {tuple(gen.shape)} vs {tuple(gt.shape)}")
        loss = gen.new_zeros(())
        for fg, ft in zip(self.features(gen), self.features(gt)):
            loss = loss + F.mse_loss(fg, ft)
        return loss


def build_perceptual(kind: str = "vgg19", weights_path=None) -> PerceptualLoss | None:
    if kind == "off":
        return None
    if kind == "stub":
        return PerceptualLoss(stub_extractor())
    return PerceptualLoss(vgg19_extractor(weights_path))


def perceptual_loss(gen, gt, extractor: PerceptualLoss) -> torch.Tensor:
    if extractor is None:
        raise ExtractorUnavailable("perceptual loss needs a feature extractor")
    return extractor(gen, gt)


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, condition=None,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over frames of ``(||grad critic(x_hat)|| - 1)^2`` at random interpolates.

    One ``u ~ U(0, 1)`` is drawn per frame of ``N x T x ...`` inputs; the
    critic must score frames independently (returns ``N x T``).
    """
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    shape = real.shape[:2] + (1,) * (real.dim() - 2)
    u = torch.rand(shape, generator=generator, dtype=real.dtype).to(real.device)
    x_hat = (u * real.detach() + (1.0 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat, condition)
    if not scores.requires_grad:
        raise RuntimeError("critic output is not differentiable w.r.t. its input")
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.flatten(2).norm(dim=2)
    return ((norms - 1.0) ** 2).mean()


def wgan_critic_step_loss(real_scores, fake_scores, gp, gp_lambda: float = 10.0):
    return fake_scores.mean() - real_scores.mean() + gp_lambda * gp


def wgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def _ce(scores: torch.Tensor, labels: torch.Tensor, from_logits: bool, eps: float) -> torch.Tensor:
    if from_logits:
        return F.cross_entropy(scores, labels)
    picked = scores.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(eps)).mean()


def _labels(label, n: int, device) -> torch.Tensor:
    labels = torch.as_tensor(label, device=device).long().reshape(-1)
    if labels.numel() == 1 and n > 1:
        labels = labels.expand(n)
    if labels.numel() and (labels.min() < 0 or labels.max() >= NUM_EMOTIONS):
        raise ValueError(f"emotion labels must be in [0, {NUM_EMOTIONS - 1}]")
    return labels


def emotion_gan_losses(posterior_real, posterior_fake, true_label, conditioned_label,
                       from_logits: bool = False, eps: float = 1e-12):
    """Seven-class emotion GAN losses ``(d_loss, g_loss)``.

    The discriminator is pushed toward the true emotion on real videos and the
    fake class on generated ones; the generator is pushed toward the emotion
    it was conditioned on.  Inputs are probabilities, or logits with
    ``from_logits=True``.
    """
    posterior_real = torch.as_tensor(posterior_real)
    posterior_fake = torch.as_tensor(posterior_fake)
    if posterior_real.dim() == 1:
        posterior_real = posterior_real[None]
    if posterior_fake.dim() == 1:
        posterior_fake = posterior_fake[None]
    real_y = _labels(true_label, len(posterior_real), posterior_real.device)
    cond_y = _labels(conditioned_label, len(posterior_fake), posterior_fake.device)
    fake_y = torch.full_like(cond_y, FAKE_CLASS)
    d_loss = (_ce(posterior_real, real_y, from_logits, eps)
              + _ce(posterior_fake, fake_y, from_logits, eps))
    g_loss = _ce(posterior_fake, cond_y, from_logits, eps)
    return d_loss, g_loss


def generator_objective(l1, perc, j_fd, j_ed, w: LossWeights | None = None):
    """``alpha * l1 + beta * perc + gamma * j_fd + delta * j_ed``.

    Plain floats are summed with ``math.fsum`` (correctly rounded); tensors
    keep their graph.  Any non-finite term raises ``NonFiniteLossError``.
    """
    w = w or LossWeights()
    terms = {"mrm_l1": l1, "perceptual": perc, "frame_gan": j_fd, "emotion_gan": j_ed}
    for name, value in terms.items():
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v).all():
            raise NonFiniteLossError(name, v)
    weighted = [w.alpha * l1, w.beta * perc, w.gamma * j_fd, w.delta * j_ed]
    if not any(torch.is_tensor(v) for v in weighted):
        return math.fsum(float(v) for v in weighted)
    return (weighted[0] + weighted[1]) + (weighted[2] + weighted[3])
