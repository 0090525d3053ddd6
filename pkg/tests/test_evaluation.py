import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from conftest import face_landmarks, write_dataset
from emoface.config import ModelConfig
from emoface.data.align import key_points
from emoface.data.clips import load_aligned_clip
from emoface.data.similarity import SimilarityTransform
from emoface.emotions import EMOTIONS
from emoface.evaluation import (PSNR_CAP, ComparisonClip, EmotionEvalReport, MetricReport,
                                align_for_comparison, build_classifier, evaluate_clip,
                                evaluate_emotion_expression, load_classifier, nlmd, psnr,
                                report_from_predictions, save_classifier, ssim,
                                train_emotion_classifier)
from emoface.evaluation.metrics import interocular_normalizer, psnr_frames
from emoface.plotting import plot_confusion, plot_losses, plot_metric_distributions


def rand_video(rng, t=2, h=32, w=32):
    return rng.integers(0, 256, (t, h, w, 3), dtype=np.uint8)


# --- PSNR -------------------------------------------------------------------

def test_psnr_identical_is_capped():
    v = rand_video(np.random.default_rng(0))
    assert psnr(v, v) == PSNR_CAP == 100.0


def test_psnr_mse_one():
    a = np.full((1, 16, 16, 3), 100, dtype=np.uint8)
    b = a.copy()
    b[..., ::2, :, :] += 1
    b[..., 1::2, :, :] -= 1
    assert psnr(a, b) == pytest.approx(10 * math.log10(255.0 ** 2), abs=1e-9)
    assert psnr(a, b) == pytest.approx(48.13, abs=0.01)


def test_psnr_on_float_scale_matches_uint8():
    rng = np.random.default_rng(1)
    a, b = rand_video(rng), rand_video(rng)
    fa, fb = a / 127.5 - 1.0, b / 127.5 - 1.0
    assert psnr(fa, fb) == pytest.approx(psnr(a, b), abs=1e-12)


def test_psnr_is_frame_mean():
    rng = np.random.default_rng(2)
    a, b = rand_video(rng, t=3), rand_video(rng, t=3)
    per = [psnr(a[i], b[i]) for i in range(3)]
    np.testing.assert_allclose(psnr_frames(a, b), per)
    assert psnr(a, b) == pytest.approx(np.mean(per))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(3)
    a = rng.integers(40, 216, (4, 32, 32, 3)).astype(np.uint8)
    values = []
    for sigma in (1, 2, 4, 8, 16):
        trials = [psnr(a, np.clip(a + rng.normal(0, sigma, a.shape), 0, 255).round().astype(np.uint8))
                  for _ in range(3)]
        values.append(np.mean(trials))
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((1, 8, 8, 3), np.uint8), np.zeros((1, 8, 9, 3), np.uint8))


# --- SSIM -------------------------------------------------------------------

def test_ssim_identity():
    v = rand_video(np.random.default_rng(4))
    assert ssim(v, v) == pytest.approx(1.0, abs=1e-9)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)
        b = np.clip(a + rng.normal(0, 30, a.shape), 0, 255).astype(np.uint8)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=255, channel_axis=-1)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_video(rng, t=1, h=16, w=20), rand_video(rng, t=1, h=16, w=20)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12
    assert -1.0 <= s <= 1.0


def test_ssim_window_too_large():
    with pytest.raises(ValueError):
        ssim(np.zeros((1, 10, 10, 3), np.uint8), np.zeros((1, 10, 10, 3), np.uint8))


# --- NLMD -------------------------------------------------------------------

def lm_video(t=3):
    return np.stack([face_landmarks(scale=0.8 + 0.05 * i) for i in range(t)])


def test_nlmd_identity_and_unit_offset():
    lm = lm_video()
    assert nlmd(lm, lm) == 0.0
    norm = interocular_normalizer(lm)
    shifted = lm + np.stack([np.array([n, 0.0]) for n in norm])[:, None, :]
    assert nlmd(shifted, lm) == pytest.approx(1.0, abs=1e-12)


def test_interocular_is_eye_centre_distance():
    lm = face_landmarks()
    eyes = key_points(lm)[:2]
    assert interocular_normalizer(lm[None])[0] == pytest.approx(np.linalg.norm(eyes[1] - eyes[0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 20), st.floats(0, 2 * np.pi))
def test_nlmd_proportional_to_translation(mag, angle):
    lm = lm_video(2)
    shift = mag * np.array([np.cos(angle), np.sin(angle)])
    expected = np.mean(mag / interocular_normalizer(lm))
    assert nlmd(lm + shift, lm) == pytest.approx(expected, rel=1e-9)


def test_nlmd_drops_failed_frames_pairwise():
    lm = lm_video(4)
    gen = lm + 1.0
    gen[1] = np.nan
    value, details = nlmd(gen, lm, return_details=True)
    assert details == {"frames_used": 3, "frames_dropped": 1, "failure_rate": 0.25}
    assert value == pytest.approx(nlmd(gen[[0, 2, 3]], lm[[0, 2, 3]]))
    with pytest.raises(ValueError):
        nlmd(np.full_like(lm, np.nan), lm)


def test_evaluate_clip_flags_landmark_failures():
    rng = np.random.default_rng(6)
    v = rand_video(rng, t=4)
    lm = lm_video(4)
    gen = lm.copy()
    gen[:2] = np.nan
    m = evaluate_clip("c", v, v, gen, lm)
    assert m.flagged and m.landmark_failure_rate == 0.5
    ok = evaluate_clip("c", v, v, lm, lm)
    assert (ok.psnr, ok.ssim, ok.nlmd, ok.flagged) == (100.0, pytest.approx(1.0), 0.0, False)
    bare = evaluate_clip("c", v, v)
    assert math.isnan(bare.nlmd) and not bare.flagged


def test_metric_report_outputs(tmp_path):
    rng = np.random.default_rng(7)
    report = MetricReport()
    for i in range(3):
        a, b = rand_video(rng), rand_video(rng)
        report.clips.append(evaluate_clip(f"clip{i}", a, b, lm_video(2), lm_video(2) + i))
    csv_path, json_path = report.write(tmp_path)
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["clip", "psnr", "ssim", "nlmd", "landmark_failure_rate", "flagged"]
    assert [r[0] for r in rows[1:]] == ["clip0", "clip1", "clip2", "MEAN"]
    data = json.loads(json_path.read_text())
    assert data["summary"]["psnr"] == pytest.approx(np.mean([c.psnr for c in report.clips]))
    assert data["metadata"]["nlmd_normalizer"].startswith("per-frame inter-ocular")
    assert data["summary"]["psnr"] >= 0 and data["summary"]["ssim"] <= 1 and data["summary"]["nlmd"] >= 0
    assert plot_metric_distributions(report, tmp_path / "m.png").stat().st_size > 0


# --- comparison alignment ---------------------------------------------------

def _face_frames(lm, h=128, w=128, t=3):
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.full((h, w, 3), 90.0)
    for k, (x, y) in enumerate(lm):
        img[..., k % 3] += 120 * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / 6.0)
    img += 30 * np.sin(xx / 7.0)[..., None]
    return np.repeat(np.clip(img, 0, 255).astype(np.uint8)[None], t, axis=0)


def test_align_identity_for_aligned_inputs():
    lm = face_landmarks()
    v = _face_frames(lm)
    aligned, tfs, excluded = align_for_comparison([ComparisonClip(v, lm, "gt"), ComparisonClip(v, lm, "gen")])
    assert excluded == []
    for tf in tfs:
        assert tf.scale == pytest.approx(1) and abs(tf.rotation) < 1e-9
        np.testing.assert_allclose(tf.translation, 0, atol=1e-9)
    np.testing.assert_array_equal(aligned[0], v)
    assert psnr(aligned[1], aligned[0]) == PSNR_CAP


def test_align_heterogeneous_sizes():
    lm = face_landmarks()
    v = _face_frames(lm)
    # a 96x128 (h x w) rendering of the same face shifted up and shrunk
    tf = SimilarityTransform(0.75, 0.0, (0.0, -8.0))
    lm_small = tf.apply(lm)
    small = _face_frames(lm_small, h=96, w=128)
    aligned, tfs, _ = align_for_comparison([ComparisonClip(v, lm, "gt"), ComparisonClip(small, lm_small, "b")])
    assert aligned[0].shape == aligned[1].shape == (3, 96, 128, 3)
    assert tfs[1].scale == pytest.approx(1 / 0.75)
    # eye/nose centres of the warped clip land on the template's
    back = tfs[1].apply(key_points(lm_small))
    np.testing.assert_allclose(back, key_points(lm), atol=1e-6)


def test_align_preserves_metrics_of_aligned_pair():
    lm = face_landmarks()
    v = _face_frames(lm)
    rng = np.random.default_rng(8)
    noisy = np.clip(v + rng.normal(0, 6, v.shape), 0, 255).astype(np.uint8)
    before = psnr(noisy, v)
    # both clips already in template pose, detections off by landmark noise only
    clips = [ComparisonClip(v, lm + rng.normal(0, 0.02, lm.shape), "gt"),
             ComparisonClip(noisy, lm + rng.normal(0, 0.02, lm.shape), "gen")]
    aligned, _, _ = align_for_comparison(clips, template_landmarks=lm)
    assert abs(psnr(aligned[1], aligned[0]) - before) < 0.1


def test_align_identical_videos_within_tenth_db():
    lm = face_landmarks()
    v = _face_frames(lm)
    aligned, _, _ = align_for_comparison([ComparisonClip(v, lm, "gt"), ComparisonClip(v.copy(), lm, "gen")])
    assert abs(psnr(aligned[1], aligned[0]) - psnr(v, v)) < 0.1


def test_align_excludes_landmark_failures(caplog):
    lm = face_landmarks()
    v = _face_frames(lm)
    aligned, _, excluded = align_for_comparison(
        [ComparisonClip(v, lm, "gt"), ComparisonClip(v, np.full((68, 2), np.nan), "bad")])
    assert excluded == ["bad"] and len(aligned) == 1
    assert "bad" in caplog.text


# --- emotion classification reports -----------------------------------------

def balanced_labels(per=5):
    return [e for e in EMOTIONS for _ in range(per)]


def test_oracle_classifier_report():
    labels = balanced_labels()
    r = report_from_predictions(labels, labels)
    np.testing.assert_array_equal(r.confusion, 100 * np.eye(6))
    assert r.accuracy == 100.0 and r.macro_f1 == 100.0


def test_all_neutral_predictor():
    labels = balanced_labels()
    r = report_from_predictions(["neutral"] * len(labels), labels)
    assert r.accuracy == pytest.approx(100 / 6) and round(r.accuracy, 1) == 16.7
    neutral = EMOTIONS.index("neutral")
    np.testing.assert_array_equal(r.confusion[:, neutral], 100.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_confusion_consistency(pairs):
    true, pred = zip(*pairs)
    r = report_from_predictions(list(pred), list(true))
    rows = r.support > 0
    np.testing.assert_allclose(r.confusion[rows].sum(axis=1), 100.0, atol=0.1)
    np.testing.assert_array_equal((r.confusion * r.support[:, None] / 100).round().astype(int), r.counts)
    weighted = (np.diag(r.confusion) * r.support).sum() / r.support.sum()
    assert r.accuracy == pytest.approx(weighted)
    assert r.accuracy == pytest.approx(100 * np.mean(np.array(true) == np.array(pred)))


def test_macro_f1_hand_computed():
    # anger: tp 1, fn 1; disgust: tp 1, fp 1 -> both F1 = 2/3
    r = report_from_predictions(["anger", "disgust", "disgust"], ["anger", "anger", "disgust"])
    assert r.macro_f1 == pytest.approx(100 * 2 / 3)


def test_report_label_mismatch():
    with pytest.raises(ValueError):
        report_from_predictions(["anger"], ["anger", "fear"])
    with pytest.raises(ValueError):
        evaluate_emotion_expression(build_classifier(ModelConfig.tiny()), [np.zeros((2, 128, 128, 3))], [])


def test_report_write(tmp_path):
    r = report_from_predictions(["anger", "fear", "fear"], ["anger", "fear", "sadness"])
    paths = r.write(tmp_path, "x", title="t")
    rows = list(csv.reader(open(paths["csv"])))
    assert rows[0] == ["true\\pred", *EMOTIONS]
    assert json.loads(paths["json"].read_text())["counts"] == r.counts.tolist()
    assert paths["figure"].stat().st_size > 0


def test_random_init_classifier_is_near_chance(tiny_cfg):
    import torch

    torch.manual_seed(0)
    clf = build_classifier(tiny_cfg)
    rng = np.random.default_rng(9)
    videos = [rng.uniform(-1, 1, (2, 128, 128, 3)).astype(np.float32) for _ in range(12)]
    r = evaluate_emotion_expression(clf, videos, balanced_labels(2))
    assert r.accuracy <= 50.0


def test_classifier_overfits_six_clips(tmp_path):
    manifest = write_dataset(tmp_path, [(e, 24, i) for i, e in enumerate(EMOTIONS)])
    cfg = ModelConfig.tiny(4)
    model, losses = train_emotion_classifier(manifest, cfg, steps=200, batch_size=6, window=8, seed=0)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    clips = [load_aligned_clip(manifest.path(e)) for e in manifest.split("train")]
    report = evaluate_emotion_expression(model, [c.video_frames for c in clips], [c.emotion for c in clips])
    assert report.accuracy == 100.0
    save_classifier(model, cfg, tmp_path / "clf.ckpt")
    again = evaluate_emotion_expression(load_classifier(tmp_path / "clf.ckpt"),
                                        [c.video_frames for c in clips], [c.emotion for c in clips])
    np.testing.assert_array_equal(again.counts, report.counts)


def test_loss_plot(tmp_path):
    log = tmp_path / "log.csv"
    log.write_text("iteration,mrm_l1,perceptual,frame_gan,emotion_gan,critic,emotion_d\n"
                   "1,0.5,0.1,,,,\n2,0.4,0.09,,,,\n")
    assert plot_losses(log, tmp_path / "l.png").stat().st_size > 0
    assert plot_confusion(np.eye(6) * 100, tmp_path / "c.png").exists()


def test_emotion_report_dataclass_empty():
    r = EmotionEvalReport(np.zeros((6, 6), dtype=int))
    assert math.isnan(r.accuracy)
    np.testing.assert_array_equal(r.confusion, 0)
