"""Two-stage adversarial training.

Stage ``init`` fits the generator with the mouth-weighted L1 and perceptual
losses only.  Stage ``gan`` then alternates, every iteration, a critic step,
an emotion-discriminator step and a generator step on the full objective.
One iteration is one generator optimizer step.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from emoface.config import (ModelConfig, TrainConfig, config_diff, model_config_from_dict,
                            to_dict, train_config_from_dict)
from emoface.data.augment import AugmentConfig
from emoface.data.manifest import Manifest
from emoface.data.window import ClipStore, sample_window
from emoface.emotions import FAKE_CLASS
from emoface.losses import (NonFiniteLossError, build_perceptual, emotion_gan_losses,
                            generator_objective, gradient_penalty, mrm_l1, wgan_critic_step_loss,
                            wgan_generator_loss)
from emoface.models import EmotionDiscriminator, FrameCritic, Generator

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_FIELDS = ("iteration", "stage", "mrm_l1", "perceptual", "frame_gan", "emotion_gan",
              "critic", "gradient_penalty", "emotion_d", "emotion_d_acc", "total",
              "lr_generator", "lr_discriminators", "wall_clock")
LOSS_FIELDS = LOG_FIELDS[2:11]


class TopologyError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, term: str | None = None, checkpoint: Path | None = None):
        super().__init__(message)
        self.term = term
        self.checkpoint = checkpoint


def _checksum(module: nn.Module) -> float:
    with torch.no_grad():
        return float(sum(p.double().abs().sum() + p.double().sum() for p in module.parameters()))


@dataclass
class Batch:
    frames: torch.Tensor     # N x W x 3 x H x W
    audio: torch.Tensor      # N x W*320
    condition: torch.Tensor  # N x 3 x H x W
    label: torch.Tensor      # N
    weights: torch.Tensor    # N x H x W, MRM loss weights
    noise: torch.Tensor      # N x W x Z


class Trainer:
    def __init__(self, model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                 device: str = "cpu", perceptual=None):
        self.model_cfg = model_cfg or ModelConfig()
        self.cfg = train_cfg or TrainConfig()
        self.device = torch.device(device)
        torch.manual_seed(self.cfg.seed)
        self.generator = Generator(self.model_cfg).to(self.device)
        self.critic = FrameCritic(self.model_cfg).to(self.device)
        self.emotion_d = EmotionDiscriminator(self.model_cfg).to(self.device)
        betas = self.cfg.adam_betas
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=self.cfg.lr_generator, betas=betas)
        self.opt_c = torch.optim.Adam(self.critic.parameters(), lr=self.cfg.lr_discriminators, betas=betas)
        self.opt_e = torch.optim.Adam(self.emotion_d.parameters(), lr=self.cfg.lr_discriminators, betas=betas)
        if perceptual is None and self.cfg.perceptual != "off":
            perceptual = build_perceptual(self.cfg.perceptual, self.cfg.vgg_weights or None)
        self.perceptual = perceptual.to(self.device) if perceptual is not None else None
        self.rng = np.random.default_rng(self.cfg.seed)
        self.noise_gen = torch.Generator().manual_seed(self.cfg.seed + 1)
        self.gp_gen = torch.Generator().manual_seed(self.cfg.seed + 2)
        self.iteration = 0
        self.stage = self.cfg.stage
        self.best_val = math.inf
        self.augment_cfg = AugmentConfig() if self.cfg.augment else None

    # -- stage handling ----------------------------------------------------------

    def set_stage(self, stage: str) -> None:
        if stage not in ("init", "gan"):
            raise ValueError(stage)
        if self.stage == "gan" and stage == "init":
            raise ValueError("stage transitions only go init -> gan")
        if stage != self.stage:
            self.iteration = 0
        self.stage = stage
        self.cfg = train_config_from_dict({**to_dict(self.cfg), "stage": stage})
        for group in self.opt_g.param_groups:
            group["lr"] = self.cfg.lr_generator

    # -- data ----------------------------------------------------------------

    def sample_batch(self, store: ClipStore, batch_size: int | None = None,
                     rng: np.random.Generator | None = None, augment: bool = True) -> Batch:
        rng = rng or self.rng
        n = batch_size or self.cfg.batch_size
        if len(store) == 0:
            raise ValueError(f"no clips in the {store.split} split")
        windows = []
        for _ in range(n):
            clip = store[int(rng.integers(0, len(store)))]
            windows.append(sample_window(clip, rng, self.cfg.window_frames,
                                         self.augment_cfg if augment else None,
                                         min_sigma=self.cfg.mrm_min_sigma))
        return self.make_batch(windows)

    def make_batch(self, windows, noise: torch.Tensor | None = None) -> Batch:
        dev = self.device
        frames = torch.from_numpy(np.stack([w.frames for w in windows])).permute(0, 1, 4, 2, 3)
        cond = torch.from_numpy(np.stack([w.condition_image for w in windows])).permute(0, 3, 1, 2)
        audio = torch.from_numpy(np.stack([w.audio for w in windows]))
        label = torch.tensor([w.label for w in windows])
        weights = torch.from_numpy(np.stack([w.mrm.loss_weights(self.cfg.mrm_base) for w in windows]))
        if noise is None:
            noise = torch.randn(len(windows), frames.shape[1], self.model_cfg.noise_dim,
                                generator=self.noise_gen)
        return Batch(frames.contiguous().to(dev), audio.to(dev), cond.contiguous().to(dev),
                     label.to(dev), weights.to(dev), noise.to(dev))

    # -- steps ------------------------------------------------------------------

    def _reconstruction(self, fake: torch.Tensor, batch: Batch):
        l1 = mrm_l1(fake, batch.frames, batch.weights)
        if self.perceptual is not None and self.cfg.weights.beta > 0:
            perc = self.perceptual(fake, batch.frames)
        else:
            perc = fake.new_zeros(())
        return l1, perc

    def _apply(self, optimizer, module, loss):
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_(module.parameters(), self.cfg.grad_clip)
        optimizer.step()

    @staticmethod
    def _check(values: dict) -> None:
        for name, value in values.items():
            if not math.isfinite(float(value)):
                raise NonFiniteLossError(name, value)

    def init_step(self, batch: Batch) -> dict:
        """Generator update on ``alpha * L1_MRM + beta * perceptual``; discriminators untouched."""
        self.generator.train()
        fake = self.generator(batch.audio, batch.condition, batch.label, batch.noise)
        l1, perc = self._reconstruction(fake, batch)
        w = self.cfg.weights
        self._check({"mrm_l1": l1.item(), "perceptual": perc.item()})
        total = w.alpha * l1 + w.beta * perc
        self._apply(self.opt_g, self.generator, total)
        return {"mrm_l1": l1.item(), "perceptual": perc.item(), "total": total.item()}

    def critic_step(self, batch: Batch, fake: torch.Tensor) -> dict:
        self.critic.train()
        real_s = self.critic(batch.frames, batch.condition)
        fake_s = self.critic(fake.detach(), batch.condition)
        gp = gradient_penalty(self.critic, batch.frames, fake.detach(), batch.condition, self.gp_gen)
        loss = wgan_critic_step_loss(real_s, fake_s, gp, self.cfg.weights.gp_lambda)
        self._check({"critic": loss.item(), "gradient_penalty": gp.item()})
        self._apply(self.opt_c, self.critic, loss)
        return {"critic": loss.item(), "gradient_penalty": gp.item(),
                "wasserstein": (fake_s.mean() - real_s.mean()).item()}

    def emotion_step(self, batch: Batch, fake: torch.Tensor) -> dict:
        self.emotion_d.train()
        real_logits = self.emotion_d(batch.frames)
        fake_logits = self.emotion_d(fake.detach())
        d_loss, _ = emotion_gan_losses(real_logits, fake_logits, batch.label, batch.label,
                                       from_logits=True)
        self._check({"emotion_d": d_loss.item()})
        self._apply(self.opt_e, self.emotion_d, d_loss)
        with torch.no_grad():
            correct = (real_logits.argmax(1) == batch.label).sum() + (fake_logits.argmax(1) == FAKE_CLASS).sum()
            acc = correct.item() / (2 * len(batch.label))
        return {"emotion_d": d_loss.item(), "emotion_d_acc": acc}

    def gan_step(self, batch: Batch) -> dict:
        """Critic step, emotion-discriminator step, then generator step on the full objective."""
        self.generator.train()
        fake = self.generator(batch.audio, batch.condition, batch.label, batch.noise)
        out = self.critic_step(batch, fake)
        out.update(self.emotion_step(batch, fake))

        for module in (self.critic, self.emotion_d):
            module.requires_grad_(False)
        try:
            l1, perc = self._reconstruction(fake, batch)
            j_fd = wgan_generator_loss(self.critic(fake, batch.condition))
            _, j_ed = emotion_gan_losses(self.emotion_d(batch.frames).detach(), self.emotion_d(fake),
                                         batch.label, batch.label, from_logits=True)
            total = generator_objective(l1, perc, j_fd, j_ed, self.cfg.weights)
            self._apply(self.opt_g, self.generator, total)
        finally:
            for module in (self.critic, self.emotion_d):
                module.requires_grad_(True)
        out.update({"mrm_l1": l1.item(), "perceptual": perc.item(), "frame_gan": j_fd.item(),
                    "emotion_gan": j_ed.item(), "total": total.item()})
        return out

    # -- validation ------------------------------------------------------------

    @torch.no_grad()
    def validate(self, store: ClipStore, batches: int | None = None) -> dict:
        if len(store) == 0:
            return {}
        rng = np.random.default_rng(12345)
        noise_gen = torch.Generator().manual_seed(12345)
        self.generator.eval()
        self.emotion_d.eval()
        l1s, correct, total = [], 0, 0
        for _ in range(batches or self.cfg.val_batches):
            windows = [sample_window(store[int(rng.integers(0, len(store)))], rng,
                                     self.cfg.window_frames, min_sigma=self.cfg.mrm_min_sigma)
                       for _ in range(self.cfg.batch_size)]
            noise = torch.randn(len(windows), self.cfg.window_frames, self.model_cfg.noise_dim,
                                generator=noise_gen)
            batch = self.make_batch(windows, noise)
            fake = self.generator(batch.audio, batch.condition, batch.label, batch.noise)
            l1s.append(mrm_l1(fake, batch.frames, batch.weights).item())
            pred = self.emotion_d(batch.frames).argmax(1)
            correct += int((pred == batch.label).sum())
            total += len(pred)
        return {"val_mrm_l1": float(np.mean(l1s)), "val_emotion_acc": correct / max(total, 1)}

    # -- loop ------------------------------------------------------------------

    def fit(self, train: ClipStore, steps: int | None = None, out_dir: Path | str | None = None,
            val: ClipStore | None = None, log_path: Path | str | None = None) -> list[dict]:
        """Run ``steps`` iterations of the current stage (default: the rest of it)."""
        steps = self.cfg.iterations - self.iteration if steps is None else steps
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        if log_path is None and out_dir:
            log_path = out_dir / "train_log.csv"
        rows: list[dict] = []
        writer = fh = None
        if log_path:
            new = not Path(log_path).exists()
            fh = open(log_path, "a", newline="")
            writer = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
            if new:
                writer.writeheader()
        start = time.time()
        step_fn = self.init_step if self.stage == "init" else self.gan_step
        try:
            for _ in range(steps):
                batch = self.sample_batch(train)
                try:
                    losses = step_fn(batch)
                except NonFiniteLossError as exc:
                    # terms are checked before their update is applied, so the
                    # generator still holds the last finite parameters
                    ckpt = self.save(out_dir / "last_good.ckpt") if out_dir else None
                    raise TrainingAborted(f"iteration {self.iteration + 1}: {exc}", exc.term, ckpt) from exc
                self.iteration += 1
                row = {k: losses.get(k, float("nan")) for k in LOSS_FIELDS}
                row.update(iteration=self.iteration, stage=self.stage,
                           lr_generator=self.opt_g.param_groups[0]["lr"],
                           lr_discriminators=self.opt_c.param_groups[0]["lr"],
                           wall_clock=round(time.time() - start, 3))
                rows.append(row)
                if writer and self.iteration % self.cfg.log_every == 0:
                    writer.writerow(row)
                    fh.flush()
                    log.info("it %d %s", self.iteration,
                             " ".join(f"{k}={row[k]:.4g}" for k in LOSS_FIELDS
                                      if isinstance(row[k], float) and math.isfinite(row[k])))
                if out_dir:
                    self._periodic(out_dir, train, val, batch)
        finally:
            if fh:
                fh.close()
        if out_dir:
            self.save(out_dir / "latest.ckpt")
        return rows

    def _periodic(self, out_dir: Path, train: ClipStore, val: ClipStore | None, batch: Batch) -> None:
        it = self.iteration
        if val is not None and len(val) and it % self.cfg.val_every == 0:
            metrics = self.validate(val)
            log.info("validation at %d: %s", it, metrics)
            with open(out_dir / "val_log.csv", "a") as fh:
                fh.write(f"{it},{self.stage},{metrics['val_mrm_l1']},{metrics['val_emotion_acc']}\n")
            if metrics["val_mrm_l1"] < self.best_val:
                self.best_val = metrics["val_mrm_l1"]
                self.save(out_dir / "best.ckpt")
        if it % self.cfg.checkpoint_every == 0:
            self.save(out_dir / "latest.ckpt")
        if it % self.cfg.sample_every == 0:
            from emoface.plotting import save_sample_grid

            with torch.no_grad():
                self.generator.eval()
                fake = self.generator(batch.audio[:1], batch.condition[:1], batch.label[:1],
                                      batch.noise[:1])
            save_sample_grid(batch.frames[0].permute(0, 2, 3, 1).cpu().numpy(),
                             fake[0].permute(0, 2, 3, 1).cpu().numpy(),
                             out_dir / "samples" / f"{self.stage}_{it:07d}.png")

    # -- checkpoints -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": to_dict(self.model_cfg),
            "train_config": to_dict(self.cfg),
            "stage": self.stage,
            "iteration": self.iteration,
            "best_val": self.best_val,
            "generator": copy.deepcopy(self.generator.state_dict()),
            "critic": copy.deepcopy(self.critic.state_dict()),
            "emotion_d": copy.deepcopy(self.emotion_d.state_dict()),
            "opt_g": copy.deepcopy(self.opt_g.state_dict()),
            "opt_c": copy.deepcopy(self.opt_c.state_dict()),
            "opt_e": copy.deepcopy(self.opt_e.state_dict()),
            "rng": {"numpy": copy.deepcopy(self.rng.bit_generator.state),
                    "noise": self.noise_gen.get_state(),
                    "gp": self.gp_gen.get_state()},
        }

    def save(self, path) -> Path:
        return save_checkpoint(self.state_dict(), path)

    def load_state_dict(self, state: dict, restore_optimizers: bool = True) -> None:
        check_topology(state, self.model_cfg)
        self.generator.load_state_dict(state["generator"])
        self.critic.load_state_dict(state["critic"])
        self.emotion_d.load_state_dict(state["emotion_d"])
        if restore_optimizers:
            self.opt_g.load_state_dict(state["opt_g"])
            self.opt_c.load_state_dict(state["opt_c"])
            self.opt_e.load_state_dict(state["opt_e"])
        self.rng.bit_generator.state = state["rng"]["numpy"]
        self.noise_gen.set_state(state["rng"]["noise"])
        self.gp_gen.set_state(state["rng"]["gp"])
        self.stage = state["stage"]
        self.iteration = int(state["iteration"])
        self.best_val = float(state.get("best_val", math.inf))

    @classmethod
    def from_checkpoint(cls, path, train_cfg: TrainConfig | None = None, device: str = "cpu",
                        perceptual=None) -> "Trainer":
        state = load_checkpoint(path)
        model_cfg = model_config_from_dict(state["model_config"])
        cfg = train_cfg or train_config_from_dict(state["train_config"])
        trainer = cls(model_cfg, train_config_from_dict({**to_dict(cfg), "stage": state["stage"]}),
                      device, perceptual)
        trainer.load_state_dict(state)
        return trainer


def save_checkpoint(state: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, model_cfg: ModelConfig | None = None) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format_version") != FORMAT_VERSION:
        raise TopologyError(f"{path}: not a format-{FORMAT_VERSION} checkpoint")
    if model_cfg is not None:
        check_topology(state, model_cfg)
    return state


def check_topology(state: dict, model_cfg: ModelConfig) -> None:
    diff = config_diff(state["model_config"], to_dict(model_cfg))
    if diff:
        raise TopologyError("checkpoint topology does not match the model config:\n  "
                            + "\n  ".join(diff))


def load_generator(path, device: str = "cpu") -> Generator:
    state = load_checkpoint(path)
    model = Generator(model_config_from_dict(state["model_config"]))
    model.load_state_dict(state["generator"])
    return model.to(device).eval()


def _stores(manifest: Manifest):
    return ClipStore(manifest, "train"), ClipStore(manifest, "val")


def train_init_stage(manifest: Manifest, config: TrainConfig, model_cfg: ModelConfig | None = None,
                     out_dir=None, steps: int | None = None, resume=None, device: str = "cpu",
                     perceptual=None) -> Trainer:
    if config.stage != "init":
        raise ValueError("train_init_stage needs config.stage == 'init'")
    train, val = _stores(manifest)
    if len(train) == 0:
        raise ValueError("manifest has an empty train split")
    if resume:
        trainer = Trainer.from_checkpoint(resume, config, device, perceptual)
    else:
        trainer = Trainer(model_cfg, config, device, perceptual)
    c_sum, e_sum = _checksum(trainer.critic), _checksum(trainer.emotion_d)
    trainer.fit(train, steps, out_dir, val)
    assert _checksum(trainer.critic) == c_sum and _checksum(trainer.emotion_d) == e_sum, \
        "discriminators changed during the init stage"
    return trainer


def train_gan_stage(manifest: Manifest, config: TrainConfig, init_checkpoint,
                    out_dir=None, steps: int | None = None, device: str = "cpu",
                    perceptual=None) -> Trainer:
    if config.stage != "gan":
        raise ValueError("train_gan_stage needs config.stage == 'gan'")
    if not init_checkpoint or not Path(init_checkpoint).exists():
        raise ValueError("the GAN stage needs an init-stage checkpoint")
    train, val = _stores(manifest)
    if len(train) == 0:
        raise ValueError("manifest has an empty train split")
    state = load_checkpoint(init_checkpoint)
    trainer = Trainer(model_config_from_dict(state["model_config"]),
                      train_config_from_dict({**to_dict(config), "stage": "init"}), device, perceptual)
    trainer.load_state_dict(state)
    if trainer.stage == "init":
        trainer.set_stage("gan")
    trainer.cfg = train_config_from_dict({**to_dict(config), "stage": "gan"})
    for group in trainer.opt_g.param_groups:
        group["lr"] = trainer.cfg.lr_generator
    for opt in (trainer.opt_c, trainer.opt_e):
        for group in opt.param_groups:
            group["lr"] = trainer.cfg.lr_discriminators
    trainer.fit(train, steps, out_dir, val)
    return trainer
