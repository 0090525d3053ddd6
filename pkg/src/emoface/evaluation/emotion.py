"""Video-based emotion classification used to score emotional expression.

The classifier is the emotion discriminator's network with six outputs (no
fake class), trained with cross-entropy on ground-truth videos only.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from emoface.config import ModelConfig, model_config_from_dict, to_dict
from emoface.data.manifest import Manifest
from emoface.data.window import ClipStore, sample_window
from emoface.emotions import EMOTIONS, NUM_EMOTIONS, emotion_index
from emoface.models import EmotionDiscriminator

log = logging.getLogger(__name__)

CLASSIFIER_KIND = "emotion_classifier"


def build_classifier(cfg: ModelConfig | None = None) -> EmotionDiscriminator:
    return EmotionDiscriminator(cfg or ModelConfig(), num_classes=NUM_EMOTIONS)


@dataclass
class EmotionEvalReport:
    counts: np.ndarray  # 6 x 6, rows = true emotion, columns = prediction

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return 100.0 * np.trace(self.counts) / total if total else float("nan")

    @property
    def confusion(self) -> np.ndarray:
        """Row-normalized percentages; empty rows stay zero."""
        rows = self.support[:, None].astype(np.float64)
        return np.divide(100.0 * self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    @property
    def per_class_f1(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = 2 * tp + fp + fn
        return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)

    @property
    def macro_f1(self) -> float:
        """Mean F1 (percent) over classes that occur in the labels or predictions."""
        present = (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0
        return 100.0 * float(self.per_class_f1[present].mean()) if present.any() else float("nan")

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "videos": int(self.counts.sum())}

    def write(self, out_dir, stem: str = "emotion", title: str | None = None) -> dict:
        from emoface.plotting import plot_confusion

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}_confusion.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["true\\pred", *EMOTIONS])
            for name, row in zip(EMOTIONS, self.confusion):
                writer.writerow([name, *(f"{v:.2f}" for v in row)])
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps({**self.summary(), "labels": list(EMOTIONS),
                                         "confusion_percent": self.confusion.round(4).tolist(),
                                         "counts": self.counts.tolist()}, indent=2))
        fig_path = plot_confusion(self.confusion, out_dir / f"{stem}_confusion.png", title=title)
        return {"csv": csv_path, "json": json_path, "figure": fig_path}


def report_from_predictions(predictions, labels) -> EmotionEvalReport:
    pred = np.array([emotion_index(p) for p in predictions], dtype=int)
    true = np.array([emotion_index(y) for y in labels], dtype=int)
    if len(pred) != len(true):
        raise ValueError(f"{len(pred)} predictions for {len(true)} labels")
    counts = np.zeros((NUM_EMOTIONS, NUM_EMOTIONS), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return EmotionEvalReport(counts)


def _video_tensor(frames) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if x.dim() == 4 and x.shape[-1] == 3:  # T x H x W x 3
        x = x.permute(0, 3, 1, 2)
    return x.unsqueeze(0)


@torch.no_grad()
def predict(classifier, videos) -> np.ndarray:
    classifier.eval()
    return np.array([int(classifier(_video_tensor(v)).argmax(1)) for v in videos])


def evaluate_emotion_expression(classifier, videos, labels) -> EmotionEvalReport:
    """Classify each ``T x H x W x 3`` video and tabulate against ``labels``."""
    videos = list(videos)
    labels = list(labels)
    if len(videos) != len(labels):
        raise ValueError(f"{len(videos)} videos for {len(labels)} labels")
    return report_from_predictions(predict(classifier, videos), labels)


def train_emotion_classifier(manifest: Manifest | ClipStore, model_cfg: ModelConfig | None = None,
                             steps: int = 1000, batch_size: int = 8, window: int = 32,
                             lr: float = 1e-4, betas=(0.5, 0.99), seed: int = 0,
                             log_every: int = 50) -> tuple[EmotionDiscriminator, list[float]]:
    """Cross-entropy training on random ground-truth windows of the train split."""
    store = manifest if isinstance(manifest, ClipStore) else ClipStore(manifest, "train")
    if len(store) == 0:
        raise ValueError("no training clips for the emotion classifier")
    torch.manual_seed(seed)
    model = build_classifier(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=betas)
    rng = np.random.default_rng(seed)
    losses = []
    model.train()
    for step in range(1, steps + 1):
        windows = [sample_window(store[int(rng.integers(0, len(store)))], rng, window)
                   for _ in range(batch_size)]
        frames = torch.from_numpy(np.stack([w.frames for w in windows])).permute(0, 1, 4, 2, 3)
        labels = torch.tensor([w.label for w in windows])
        loss = F.cross_entropy(model(frames), labels)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % log_every == 0:
            log.info("classifier step %d loss %.4f", step, loss.item())
    return model, losses


def save_classifier(model: EmotionDiscriminator, cfg: ModelConfig, path) -> Path:
    from emoface.training import FORMAT_VERSION, save_checkpoint

    return save_checkpoint({"format_version": FORMAT_VERSION, "kind": CLASSIFIER_KIND,
                            "model_config": to_dict(cfg), "classifier": model.state_dict()}, path)


def load_classifier(path) -> EmotionDiscriminator:
    from emoface.training import load_checkpoint

    state = load_checkpoint(path)
    if state.get("kind") != CLASSIFIER_KIND:
        raise ValueError(f"{path} is not an emotion-classifier checkpoint")
    model = build_classifier(model_config_from_dict(state["model_config"]))
    model.load_state_dict(state["classifier"])
    return model.eval()
