"""Acceptance suite: one PASS/FAIL line per criterion, printed in the run summary.

Run on its own with ``pytest tests/test_acceptance.py -v`` (about 7 minutes on one CPU core).
"""

import csv
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import ACCEPTANCE, blob_detector, blob_image, face_landmarks, write_dataset
from emoface.cli import main
from emoface.config import LossWeights, ModelConfig, TrainConfig
from emoface.data import align as A
from emoface.data.clips import RawClip, denormalize_pixels
from emoface.data.similarity import SimilarityTransform, estimate_similarity
from emoface.data.window import ClipStore
from emoface.emotions import EMOTIONS
from emoface.evaluation import PSNR_CAP, nlmd, psnr, ssim
from emoface.losses import PerceptualLoss, generator_objective, gradient_penalty, mrm_l1, stub_extractor
from emoface.models import EmotionDiscriminator, FrameCritic, Generator, generate
from emoface.training import Trainer

README = Path(__file__).resolve().parents[1] / "README.md"


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
    assert ok, detail


@pytest.fixture(autouse=True)
def _mark_errors(request):
    before = set(ACCEPTANCE)
    yield
    key = getattr(request.function, "criterion", None)
    if key and key not in ACCEPTANCE and key not in before:
        ACCEPTANCE[key] = (False, "raised before reaching its check")


def criterion(key):
    def wrap(fn):
        fn.criterion = key
        return fn
    return wrap


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def central_diff(fn, tensor, idx, eps=1e-6):
    flat = tensor.data.view(-1)
    out = []
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def input_grad_check(fn, x, n=30, seed=0):
    x = x.detach().clone()
    v = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(v), v)
    idx = np.random.default_rng(seed).choice(x.numel(), n, replace=False)
    return rel_err(g.reshape(-1)[idx], central_diff(lambda: fn(x), x, idx))


# --- C1 ---------------------------------------------------------------------

@criterion("C1 full-scale results documented as stretch targets")
def test_c1_full_scale_results_documented():
    text = README.read_text()
    numbers = ["30.91", "0.85", "0.113", "62.71", "65.67"]
    missing = [n for n in numbers if n not in text]
    record("C1 full-scale results documented as stretch targets",
           not missing and "not reproduced" in text,
           f"README lists {len(numbers) - len(missing)}/{len(numbers)} reference numbers as unreproduced targets")


# --- C2 ---------------------------------------------------------------------

@criterion("C2 shape pipeline")
def test_c2_shape_pipeline():
    torch.manual_seed(0)
    gen = Generator().eval()
    rng = np.random.default_rng(0)
    audio = rng.normal(0, 0.2, 10240).astype(np.float32)          # 1.28 s at 8 kHz
    image = rng.uniform(-1, 1, (128, 128, 3)).astype(np.float32)
    timings, ok = [], True
    for emotion in ("anger", "neutral"):
        t0 = time.perf_counter()
        frames = generate(gen, audio, image, emotion, noise_seed=0)
        timings.append(time.perf_counter() - t0)
        ok &= frames.shape == (32, 128, 128, 3) and frames.min() >= -1 and frames.max() <= 1
    record("C2 shape pipeline", ok and max(timings) < 60,
           f"32x128x128x3 in [-1,1] at default widths, slowest call {max(timings):.1f}s (limit 60s)")


# --- C3 ---------------------------------------------------------------------

@criterion("C3 speech-encoder rate law")
def test_c3_speech_rate_law():
    enc = Generator().speech.eval()
    got = {}
    with torch.no_grad():
        for n in (1, 25, 32, 250):
            got[n] = enc(torch.randn(1, n * 320)).shape[1]
    record("C3 speech-encoder rate law", all(got[n] == n for n in got),
           "embedding lengths " + ", ".join(f"{n}->{got[n]}" for n in got))


# --- C4 ---------------------------------------------------------------------

@criterion("C4 gradient checks")
def test_c4_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    errors = {}

    gen = torch.rand(1, 2, 3, 16, 16, dtype=torch.float64)
    gt = gen + torch.where(torch.rand_like(gen) > 0.5, 0.2, -0.2)
    w = torch.rand(16, 16, dtype=torch.float64) + 0.1
    errors["mrm_l1"] = input_grad_check(lambda v: mrm_l1(v, gt, w), gen)

    perc = PerceptualLoss(stub_extractor(width=4)).double()
    a = torch.rand(1, 1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    b = torch.rand(1, 1, 3, 32, 32, dtype=torch.float64) * 2 - 1
    errors["perceptual"] = input_grad_check(lambda v: perc(v, b), a)

    cfg = ModelConfig.tiny()
    critic = FrameCritic(cfg).double()
    real = torch.rand(1, 2, 3, 128, 128, dtype=torch.float64) * 2 - 1
    fake = torch.rand(1, 2, 3, 128, 128, dtype=torch.float64) * 2 - 1
    cond = torch.rand(1, 3, 128, 128, dtype=torch.float64) * 2 - 1

    def gp():
        return gradient_penalty(critic, real, fake, cond, torch.Generator().manual_seed(3))

    ana, num = [], []
    rng = np.random.default_rng(1)
    params = [p for p in critic.parameters()]
    # the last bias does not move input gradients: analytic None, checked against FD as zero
    grads = torch.autograd.grad(gp(), params, allow_unused=True)
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        idx = rng.choice(p.numel(), min(3, p.numel()), replace=False)
        ana.extend(g.reshape(-1)[idx].tolist())
        num.extend(central_diff(gp, p, idx).tolist())
    errors["gradient_penalty"] = rel_err(ana, num)

    torch.manual_seed(0)
    model = Generator(cfg).double().eval()
    audio = torch.randn(1, 2 * 320, dtype=torch.float64) * 0.3
    image = torch.rand(1, 3, 128, 128, dtype=torch.float64) * 2 - 1
    noise = torch.randn(1, 2, cfg.noise_dim, dtype=torch.float64)
    probe = torch.randn(1, 2, 3, 128, 128, dtype=torch.float64)

    def out():
        return (model(audio, image, torch.tensor([2]), noise) * probe).sum()

    # norm-wise error over probes from every tensor; single deep speech-encoder entries have
    # gradients near 1e-7, below what central differences resolve on an O(1e2) output
    params = list(model.parameters())
    grads = torch.autograd.grad(out(), params)
    ana, num = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            idx = rng.choice(p.numel(), min(2, p.numel()), replace=False)
            ana.extend(g.reshape(-1)[idx].numpy())
            num.extend(central_diff(out, p, idx))
    errors["generator_params"] = rel_err(ana, num)
    elapsed = time.perf_counter() - t0
    ok = all(e <= 1e-3 for e in errors.values()) and elapsed < 300
    record("C4 gradient checks", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
           + f" ({len(num)} probes over {len(params)} generator tensors); {elapsed:.0f}s (limit 300s)")


# --- C5 ---------------------------------------------------------------------

class LinearCritic(torch.nn.Module):
    def __init__(self, slope):
        super().__init__()
        self.slope = slope

    def forward(self, x, condition=None):
        return self.slope * x.flatten(2).sum(-1) / math.sqrt(x[0, 0].numel())


@criterion("C5 WGAN-GP oracle")
def test_c5_wgan_gp_oracle():
    real = torch.rand(4, 3, 3, 8, 8, dtype=torch.float64)
    fake = torch.rand(4, 3, 3, 8, 8, dtype=torch.float64)
    unit = gradient_penalty(LinearCritic(1.0), real, fake).item()
    double = gradient_penalty(LinearCritic(2.0), real, fake).item()
    record("C5 WGAN-GP oracle", abs(unit) < 1e-6 and abs(double - 1) < 1e-6,
           f"unit-gradient critic {unit:.2e}, gradient-2 critic {double:.8f}")


# --- C6 ---------------------------------------------------------------------

def square_videos(n, gen):
    """Class k: a bright square in cell k of a 3x3 grid, colour channel k mod 3."""
    y = torch.arange(n) % 7
    x = torch.randn(n, 4, 3, 128, 128, generator=gen) * 0.1 - 0.5
    for i, k in enumerate(y.tolist()):
        r, c = divmod(k, 3)
        x[i, :, k % 3, 16 + 32 * r:48 + 32 * r, 16 + 32 * c:48 + 32 * c] += 1.0
    return x, y


@criterion("C6 emotion discriminator")
def test_c6_emotion_discriminator():
    torch.manual_seed(0)
    d = EmotionDiscriminator().eval()
    sums = []
    with torch.no_grad():
        for t in (1, 8, 32):
            p = d.posterior(torch.rand(1, t, 3, 128, 128) * 2 - 1)
            sums.append(float((p.sum() - 1).abs()))
            assert p.shape == (1, 7) and (p >= 0).all()
    torch.manual_seed(0)
    d = EmotionDiscriminator(ModelConfig.tiny(4))
    tcfg = TrainConfig()
    opt = torch.optim.Adam(d.parameters(), lr=tcfg.lr_discriminators, betas=tcfg.adam_betas)
    g = torch.Generator().manual_seed(1)
    x_test, y_test = square_videos(70, torch.Generator().manual_seed(2))
    reached = None
    for step in range(1, 201):
        x, y = square_videos(14, g)
        loss = F.cross_entropy(d(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 10 == 0:
            with torch.no_grad():
                acc = (d(x_test).argmax(1) == y_test).float().mean().item()
            if acc == 1.0:
                reached = step
                break
    record("C6 emotion discriminator", max(sums) <= 1e-5 and reached is not None,
           f"posterior sums within {max(sums):.1e} of 1 for T=1,8,32; 7-way toy at 100% "
           f"held-out accuracy after {reached} steps (limit 200)")


# --- C7 ---------------------------------------------------------------------

def smoke_cfg(**kw):
    base = dict(perceptual="stub", augment=False, log_every=1, val_every=10**9, sample_every=10**9,
                checkpoint_every=10**9, window_frames=8, batch_size_init=2, batch_size_gan=2)
    base.update(kw)
    return TrainConfig(**base)


@criterion("C7 overfit and GAN smoke")
def test_c7_overfit_and_gan_smoke(tmp_path):
    manifest = write_dataset(tmp_path, [("anger", 40, 1), ("happiness", 40, 2)])
    store = ClipStore(manifest, "train")
    t0 = time.perf_counter()
    init = Trainer(ModelConfig.tiny(), smoke_cfg())
    rows = init.fit(store, 500)
    mrm = np.array([r["mrm_l1"] for r in rows])
    start, end = mrm[:10].mean(), mrm[-10:].mean()
    drop = 1 - end / start
    gan = Trainer(ModelConfig.tiny(), smoke_cfg(stage="gan"))
    gan.load_state_dict(init.state_dict(), restore_optimizers=False)
    gan.set_stage("gan")
    gan_rows = gan.fit(store, 100)
    terms = ("mrm_l1", "perceptual", "frame_gan", "emotion_gan", "critic", "emotion_d")
    finite = all(np.isfinite(r[k]) for r in gan_rows for k in terms)
    elapsed = time.perf_counter() - t0
    record("C7 overfit and GAN smoke", drop >= 0.5 and finite and len(gan_rows) == 100 and elapsed < 1800,
           f"MRM L1 {start:.4f} -> {end:.4f} over 500 init iterations ({100 * drop:.0f}% drop, need 50%); "
           f"100 GAN steps with all terms finite: {finite}; {elapsed:.0f}s (limit 1800s)")


# --- C8 ---------------------------------------------------------------------

@criterion("C8 metric oracles")
def test_c8_metric_oracles():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (2, 64, 64, 3), dtype=np.uint8)
    cap = psnr(a, a)
    self_ssim = ssim(a, a)
    lm = np.stack([face_landmarks(), face_landmarks(scale=0.9)])
    zero = nlmd(lm, lm)
    base = np.full((1, 32, 32, 3), 128, np.uint8)
    pm = base.copy()
    pm[..., ::2, :, :] += 1
    pm[..., 1::2, :, :] -= 1
    mse1 = psnr(base, pm)
    asym = 0.0
    for _ in range(100):
        x = rng.integers(0, 256, (1, 24, 24, 3), dtype=np.uint8)
        y = rng.integers(0, 256, (1, 24, 24, 3), dtype=np.uint8)
        asym = max(asym, abs(ssim(x, y) - ssim(y, x)))
    ok = (cap == PSNR_CAP and abs(self_ssim - 1) <= 1e-9 and zero == 0
          and abs(mse1 - 48.13) <= 0.01 and asym <= 1e-12)
    record("C8 metric oracles", ok,
           f"psnr(a,a)={cap:g} dB, ssim(a,a)=1{self_ssim - 1:+.1e}, nlmd(l,l)={zero:g}, "
           f"MSE-1 PSNR {mse1:.4f} dB, max SSIM asymmetry over 100 pairs {asym:.1e}")


# --- C9 ---------------------------------------------------------------------

@criterion("C9 alignment oracle")
def test_c9_alignment_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        tf = SimilarityTransform(float(rng.uniform(0.3, 3.0)), float(rng.uniform(-3.1, 3.1)),
                                 tuple(rng.uniform(-100, 100, 2)))
        while True:
            p = rng.uniform(-50, 50, (3, 2))
            d1, d2 = p[1] - p[0], p[2] - p[0]
            if abs(d1[0] * d2[1] - d1[1] * d2[0]) > 500:
                break
        est = estimate_similarity(p, tf.apply(p))
        err = max(abs(est.scale - tf.scale), abs(est.rotation - tf.rotation),
                  *np.abs(np.subtract(est.translation, tf.translation)))
        worst = max(worst, err)

    template = face_landmarks(scale=0.9)
    kp = A.key_points(template)
    px = 0.0
    for _ in range(5):
        off = SimilarityTransform(float(rng.uniform(0.8, 1.2)), float(rng.uniform(-0.3, 0.3)),
                                  tuple(rng.uniform(-8, 8, 2)))
        frame = blob_image(off.apply(kp), [0, 1, 2], sigma=3.0)
        raw = RawClip(np.repeat(frame[None], 5, 0), 25.0, np.zeros(1600), 8000, "1001", "DFA", "anger",
                      None, "1001_DFA_ANG_XX")
        out = A.align_clip(raw, template, detector=blob_detector)
        found = A.key_points(blob_detector(denormalize_pixels(out.video_frames[0])))
        px = max(px, float(np.abs(found - kp).max()))
    record("C9 alignment oracle", worst <= 1e-6 and px < 0.5,
           f"1000 transforms recovered within {worst:.1e}; warped-template landmarks recovered "
           f"within {px:.3f} px (limit 0.5)")


# --- C10 --------------------------------------------------------------------

@criterion("C10 objective arithmetic")
def test_c10_objective_arithmetic():
    value = generator_objective(1, 1, 1, 1, LossWeights())
    record("C10 objective arithmetic", value == 101.011, f"weights (100, 1, 0.01, 0.001) on ones -> {value!r}")


# --- C11 --------------------------------------------------------------------

@criterion("C11 mismatch stimuli")
def test_c11_mismatch_stimuli(tmp_path):
    ckpt = tmp_path / "gen.ckpt"
    Trainer(ModelConfig.tiny(), TrainConfig(perceptual="off")).save(ckpt)
    specs = [(e, 12, 10 * i + k) for i, e in enumerate(EMOTIONS) for k in range(2)]
    write_dataset(tmp_path / "d", specs, split_of=lambda i: "test")
    out = tmp_path / "stimuli"
    code = main(["mismatch", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "d" / "manifest.csv"),
                 "--per-pair", "2", "--out", str(out), "--log-level", "WARNING"])
    rows = list(csv.DictReader(open(out / "stimuli.csv")))
    videos = sorted(out.glob("*.mp4"))
    pairs = Counter((r["audio_emotion"], r["visual_emotion"]) for r in rows)
    mismatched = sum(r["audio_emotion"] != r["visual_emotion"] for r in rows)
    ok = (code == 0 and len(videos) == len(rows) == 72 and mismatched == 60
          and pairs == Counter({(a, v): 2 for a in EMOTIONS for v in EMOTIONS})
          and {r["file"] for r in rows} == {v.name for v in videos})
    record("C11 mismatch stimuli", ok,
           f"{len(videos)} videos, {len(rows)} manifest rows, {mismatched} mismatched, "
           f"pair multiset 2x(6x6): {pairs == Counter({(a, v): 2 for a in EMOTIONS for v in EMOTIONS})}")


# --- C12 --------------------------------------------------------------------

@criterion("C12 determinism")
def test_c12_determinism(tmp_path):
    manifest = write_dataset(tmp_path, [("anger", 40, 1), ("happiness", 40, 2)])
    logs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        Trainer(ModelConfig.tiny(), smoke_cfg(seed=7)).fit(ClipStore(manifest, "train"), 100, out)
        with open(out / "train_log.csv") as fh:
            logs.append([{k_: v for k_, v in r.items() if k_ != "wall_clock"} for r in csv.DictReader(fh)])
    same = logs[0] == logs[1] and len(logs[0]) == 100
    record("C12 determinism", same,
           f"two seeded 100-step init runs: {len(logs[0])} log rows each, identical: {logs[0] == logs[1]}")
