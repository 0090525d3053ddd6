"""Command-line entry point: ``emoface <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from emoface.config import (ConfigError, LossWeights, ModelConfig, TrainConfig, load_config, to_dict,
                            train_config_from_dict)
from emoface.emotions import EMOTIONS, SAMPLES_PER_FRAME, emotion_name

log = logging.getLogger("emoface")

VIDEO_SUFFIXES = (".flv", ".mp4", ".avi", ".mov", ".mkv")
STIMULI_HEADER = ("file", "audio_emotion", "visual_emotion", "source_clip")


class UsageError(Exception):
    """Invalid arguments or configuration, reported before any compute."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _defaults_epilog() -> str:
    t, w = TrainConfig(), LossWeights()
    return (
        "training defaults:\n"
        f"  iterations per stage     init={t.iterations_init}, gan={t.iterations_gan}\n"
        f"  Adam betas               {t.adam_betas}\n"
        f"  generator lr             init={t.lr_generator_init:g}, gan={t.lr_generator_gan:g}\n"
        f"  discriminator lr         {t.lr_discriminators:g}\n"
        f"  batch size               init={t.batch_size_init}, gan={t.batch_size_gan}\n"
        f"  frames per sample        {t.window_frames}\n"
        f"  loss weights             alpha={w.alpha:g} beta={w.beta:g} gamma={w.gamma:g} delta={w.delta:g}\n"
        f"  gradient penalty weight  {w.gp_lambda:g}\n"
        "  video 25 FPS, audio 8 kHz, frames 128x128 in [-1, 1]\n"
        "override any value with --set section.key=value (sections: model, train, weights)"
    )


# --- shared helpers -----------------------------------------------------------

def _out_dir(args, create: bool = True) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to write into it")
    if create:
        out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _detector(args):
    if getattr(args, "detector", None):
        from emoface.data.align import load_detector

        try:
            return load_detector(args.detector)
        except (ImportError, AttributeError, ValueError) as exc:
            raise UsageError(f"cannot load detector {args.detector!r}: {exc}") from None
    return None


def _raw_videos(raw_dir: Path) -> list[Path]:
    return sorted(p for p in raw_dir.iterdir() if p.suffix.lower() in VIDEO_SUFFIXES)


def _first_frame_landmarks(video: Path, args, detector):
    """Landmarks of frame 0 from a sidecar file or the detector (None on failure)."""
    sidecar = Path(args.landmarks_dir or video.parent) / f"{video.stem}.landmarks.npy"
    if sidecar.exists():
        lm = np.load(sidecar, mmap_mode="r")[0]
        return np.array(lm) if np.isfinite(lm).all() else None
    if detector is None:
        return None
    import cv2

    cap = cv2.VideoCapture(str(video))
    ok, frame = cap.read()
    cap.release()
    if not ok:
        return None
    lm = detector(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    return None if lm is None else np.asarray(lm, dtype=np.float64)


def _build_templates(videos, args, detector) -> dict[str, np.ndarray]:
    from emoface.data.align import make_template
    from emoface.data.clips import parse_clip_name

    by_actor: dict[str, list] = defaultdict(list)
    for video in videos:
        try:
            actor = parse_clip_name(video.stem)[0]
        except ValueError:
            continue
        lm = _first_frame_landmarks(video, args, detector)
        if lm is not None:
            by_actor[actor].append(lm)
    templates = {}
    for actor, cands in sorted(by_actor.items()):
        templates[actor] = make_template(cands)
    return templates


# --- commands ----------------------------------------------------------------

def cmd_make_template(args) -> int:
    raw_dir = _need(args.raw_dir, "raw directory")
    detector = _detector(args)
    out = _out_dir(args)
    videos = _raw_videos(raw_dir)
    if not videos:
        raise UsageError(f"no videos in {raw_dir}")
    templates = _build_templates(videos, args, detector)
    if not templates:
        log.error("no landmarks found; supply --detector or *.landmarks.npy sidecars")
        return 2
    for actor, tpl in templates.items():
        np.save(out / f"{actor}.npy", tpl)
    print(f"wrote {len(templates)} templates to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from emoface.data.align import ClipRejected, align_clip
    from emoface.data.clips import parse_clip_name, read_raw_clip, save_aligned_clip
    from emoface.data.manifest import Manifest, ManifestEntry, build_manifest

    raw_dir = _need(args.raw_dir, "raw directory")
    detector = _detector(args)
    ratios = tuple(float(r) for r in args.ratios.split(","))
    if len(ratios) != 3:
        raise UsageError("--ratios needs three comma-separated values")
    if args.split_file:
        _need(args.split_file, "split file")
    out = _out_dir(args)
    videos = _raw_videos(raw_dir)
    if not videos:
        raise UsageError(f"no videos in {raw_dir}")

    if args.templates:
        tdir = _need(args.templates, "template directory")
        templates = {p.stem: np.load(p) for p in tdir.glob("*.npy")}
    else:
        templates = _build_templates(videos, args, detector)
        (out / "templates").mkdir(exist_ok=True)
        for actor, tpl in templates.items():
            np.save(out / "templates" / f"{actor}.npy", tpl)

    clips_dir = out / "clips"
    rejected: list[tuple[str, str]] = []
    written = 0
    for video in videos:
        try:
            actor = parse_clip_name(video.stem)[0]
            if actor not in templates:
                raise ClipRejected(f"no template for actor {actor}")
            raw = read_raw_clip(video, args.audio_dir, args.landmarks_dir)
            aligned = align_clip(raw, templates[actor], detector)
            save_aligned_clip(aligned, clips_dir / video.stem)
            written += 1
        except (ClipRejected, OSError, ValueError) as exc:
            log.warning("rejected %s: %s", video.name, exc)
            rejected.append((video.name, str(exc)))

    print(f"aligned {written} of {len(videos)} clips; rejected {len(rejected)}")
    for name, why in rejected:
        print(f"  rejected {name}: {why}")
    if written == 0:
        log.error("no clips were aligned")
        return 2
    manifest = build_manifest(clips_dir, ratios, args.seed or 0, args.split_file, args.min_frames)
    entries = [ManifestEntry(f"clips/{e.clip_path}", e.actor_id, e.sentence_id, e.emotion, e.split)
               for e in manifest.entries]
    Manifest(entries, manifest.split_seed).write(out / "manifest.csv")
    for name in manifest.rejected:
        print(f"  not in manifest: {name}")
    print(f"manifest: {len(entries)} clips {Manifest(entries).counts()} -> {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    from emoface.data.manifest import Manifest
    from emoface.plotting import plot_losses
    from emoface.training import Trainer, train_gan_stage, train_init_stage

    model_cfg, train_cfg = _configs(args)
    stage = args.stage or train_cfg.stage
    train_cfg = train_config_from_dict({**to_dict(train_cfg), "stage": stage})
    manifest_path = _need(args.manifest, "--manifest")
    if stage == "gan" and not args.init_checkpoint and not args.resume:
        raise UsageError("--stage gan needs --init-checkpoint (an init-stage checkpoint)")
    if args.init_checkpoint:
        _need(args.init_checkpoint, "--init-checkpoint")
    if args.resume:
        _need(args.resume, "--resume")
    manifest = Manifest.read(manifest_path)
    if not manifest.split("train"):
        raise UsageError(f"{manifest_path} has no train clips")
    if train_cfg.perceptual == "vgg19":
        from emoface.losses import ExtractorUnavailable, build_perceptual

        try:
            perceptual = build_perceptual("vgg19", train_cfg.vgg_weights or None)
        except ExtractorUnavailable as exc:
            raise UsageError(str(exc)) from None
    else:
        perceptual = None
    out = _out_dir(args)

    if stage == "init":
        trainer = train_init_stage(manifest, train_cfg, model_cfg, out, args.steps, args.resume,
                                   args.device, perceptual)
    elif args.resume:
        from emoface.data.window import ClipStore

        trainer = Trainer.from_checkpoint(args.resume, train_cfg, args.device, perceptual)
        trainer.fit(ClipStore(manifest, "train"), args.steps, out, ClipStore(manifest, "val"))
    else:
        trainer = train_gan_stage(manifest, train_cfg, args.init_checkpoint, out, args.steps,
                                  args.device, perceptual)
    if (out / "train_log.csv").exists():
        plot_losses(out / "train_log.csv", out / "losses.png")
    print(f"{stage} stage at iteration {trainer.iteration}; checkpoint {out / 'latest.ckpt'}")
    return 0


def _prepare_image(args) -> np.ndarray:
    import cv2

    from emoface.data.align import key_points, make_template, warp_frames
    from emoface.data.clips import normalize_pixels
    from emoface.data.similarity import estimate_similarity

    img = cv2.imread(str(args.image))
    if img is None:
        raise UsageError(f"cannot read image {args.image}")
    img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    if args.no_align:
        if img.shape[:2] != (128, 128):
            img = cv2.resize(img, (128, 128), interpolation=cv2.INTER_AREA)
        return normalize_pixels(img)
    if args.landmarks:
        lm = np.load(_need(args.landmarks, "--landmarks"))
    else:
        detector = _detector(args)
        if detector is None:
            raise UsageError("face alignment needs --landmarks or --detector (or pass --no-align)")
        lm = detector(img)
        if lm is None:
            raise UsageError(f"no face found in {args.image}")
    lm = np.asarray(lm, dtype=np.float64)
    template = np.load(_need(args.template, "--template")) if args.template else make_template([lm])
    tf = estimate_similarity(key_points(lm), key_points(template))
    return normalize_pixels(warp_frames(img[None], tf)[0])


def cmd_generate(args) -> int:
    from emoface.data.clips import load_audio
    from emoface.models import generate
    from emoface.plotting import plot_emotion_rows
    from emoface.training import load_generator
    from emoface.video import save_generated

    ckpt = _need(args.checkpoint, "--checkpoint")
    audio_path = _need(args.audio, "--audio")
    _need(args.image, "--image")
    if args.all_emotions:
        emotions = list(EMOTIONS)
    elif args.emotion:
        try:
            emotions = [emotion_name(args.emotion)]
        except ValueError:
            raise UsageError(f"unknown emotion {args.emotion!r}; valid: {', '.join(EMOTIONS)}") from None
    else:
        raise UsageError(f"--emotion or --all-emotions is required; valid: {', '.join(EMOTIONS)}")
    image = _prepare_image(args)
    audio = load_audio(audio_path)
    if len(audio) < SAMPLES_PER_FRAME:
        raise UsageError(f"{audio_path} is shorter than one video frame (40 ms)")
    out = _out_dir(args)
    model = load_generator(ckpt, args.device)
    seed = args.seed or 0
    stem = Path(audio_path).stem
    videos = {}
    for emo in emotions:
        frames = generate(model, audio, image, emo, seed)
        save_generated(frames, audio[:len(frames) * SAMPLES_PER_FRAME], out, f"{stem}_{emo}",
                       {"emotion": emo, "seed": seed, "audio": str(audio_path),
                        "image": str(args.image), "effective_duration": len(frames) / 25})
        videos[emo] = frames
        print(f"{emo}: {len(frames)} frames -> {out / f'{stem}_{emo}.mp4'}")
    if len(videos) > 1:
        plot_emotion_rows(videos, out / f"{stem}_emotions.png", condition_image=image)
    return 0


def _clip_dirs(root: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(root.iterdir())
            if p.is_dir() and ((p / "frames.npy").exists() or (p / "frames").is_dir())}


def cmd_evaluate(args) -> int:
    from emoface.data.align import detect_all
    from emoface.evaluation.compare import ComparisonClip, align_for_comparison
    from emoface.evaluation.metrics import MetricReport, evaluate_clip
    from emoface.plotting import plot_metric_distributions
    from emoface.video import load_clip_dir

    gen_root = _need(args.gen, "--gen")
    gt_root = _need(args.gt, "--gt")
    detector = _detector(args)
    gen_dirs, gt_dirs = _clip_dirs(gen_root), _clip_dirs(gt_root)
    pairs = [(n, gen_dirs[n], gt_dirs[n]) for n in gen_dirs if n in gt_dirs]
    if not pairs:
        raise UsageError(f"no clip directories with matching names in {gen_root} and {gt_root}")
    out = _out_dir(args)
    report = MetricReport()
    for name, gdir, tdir in pairs:
        gen, gt = load_clip_dir(gdir), load_clip_dir(tdir)
        n = min(len(gen["frames"]), len(gt["frames"]))
        gf, tf = gen["frames"][:n], gt["frames"][:n]
        glm = gen["landmarks"][:n] if gen["landmarks"] is not None else None
        tlm = gt["landmarks"][:n] if gt["landmarks"] is not None else None
        if args.align:
            if detector is None and (glm is None or tlm is None):
                raise UsageError("--align needs landmarks files or --detector")
            g0 = glm[0] if glm is not None else detect_all(gf[:1], detector)[0]
            t0 = tlm[0] if tlm is not None else detect_all(tf[:1], detector)[0]
            aligned, _, excluded = align_for_comparison(
                [ComparisonClip(tf, t0, "gt"), ComparisonClip(gf, g0, "gen")])
            if excluded:
                log.warning("%s excluded from comparison: %s", name, excluded)
                continue
            tf, gf = aligned
            glm = tlm = None
        if detector is not None and (glm is None or tlm is None):
            glm, tlm = detect_all(gf, detector), detect_all(tf, detector)
        report.clips.append(evaluate_clip(name, gf, tf, glm, tlm))
    if args.align:
        report.metadata["aligned_for_comparison"] = True
    report.write(out)
    plot_metric_distributions(report, out / "metrics.png")
    s = report.summary()
    print(f"PSNR {s['psnr']:.2f} dB  SSIM {s['ssim']:.4f}  NLMD {s['nlmd']:.4f}  "
          f"({s['clips']} clips, {s['flagged']} flagged)")
    return 0


def cmd_emoclf(args) -> int:
    from emoface.data.clips import load_aligned_clip
    from emoface.data.manifest import Manifest
    from emoface.evaluation.emotion import (evaluate_emotion_expression, load_classifier,
                                            save_classifier, train_emotion_classifier)
    from emoface.video import frames_as_float, load_clip_dir

    model_cfg, train_cfg = _configs(args)
    manifest = Manifest.read(_need(args.manifest, "--manifest"))
    if args.classifier:
        _need(args.classifier, "--classifier")
    elif not manifest.split("train"):
        raise UsageError("training the classifier needs a non-empty train split")
    if args.gen:
        _need(args.gen, "--gen")
    out = _out_dir(args)

    if args.classifier:
        model = load_classifier(args.classifier)
    else:
        model, _ = train_emotion_classifier(manifest, model_cfg, steps=args.steps,
                                            batch_size=args.batch_size, window=train_cfg.window_frames,
                                            lr=train_cfg.lr_discriminators, betas=train_cfg.adam_betas,
                                            seed=train_cfg.seed)
        save_classifier(model, model_cfg, out / "classifier.ckpt")

    results = {}
    splits = ["train"] if not args.classifier else []
    splits += [s for s in args.eval_splits.split(",") if s and s not in splits]
    for split in splits:
        entries = manifest.split(split)
        if not entries:
            continue
        clips = [load_aligned_clip(manifest.path(e)) for e in entries]
        report = evaluate_emotion_expression(model, [c.video_frames for c in clips],
                                             [c.emotion for c in clips])
        report.write(out, f"gt_{split}", title=f"ground truth ({split})")
        results[f"gt_{split}"] = report.summary()
    if args.gen:
        videos, labels = [], []
        for d in sorted(Path(args.gen).iterdir()):
            if d.is_dir() and (d / "meta.json").exists():
                clip = load_clip_dir(d)
                if "emotion" in clip["meta"]:
                    videos.append(frames_as_float(clip["frames"]))
                    labels.append(clip["meta"]["emotion"])
        if videos:
            report = evaluate_emotion_expression(model, videos, labels)
            report.write(out, "generated", title="generated")
            results["generated"] = report.summary()
    (out / "emoclf_summary.json").write_text(json.dumps(results, indent=2))
    for key, s in results.items():
        print(f"{key}: accuracy {s['accuracy']:.2f}%  macro-F1 {s['macro_f1']:.2f}  ({s['videos']} videos)")
    return 0


def cmd_mismatch(args) -> int:
    from emoface.data.clips import load_aligned_clip
    from emoface.data.manifest import Manifest
    from emoface.models import generate
    from emoface.training import load_generator
    from emoface.video import save_generated

    ckpt = _need(args.checkpoint, "--checkpoint")
    manifest = Manifest.read(_need(args.manifest, "--manifest"))
    if args.per_pair < 1:
        raise UsageError("--per-pair must be positive")
    by_emotion = defaultdict(list)
    for e in manifest.split(args.split):
        by_emotion[e.emotion].append(e)
    short = [e for e in EMOTIONS if len(by_emotion[e]) < args.per_pair]
    if short:
        raise UsageError(f"need {args.per_pair} {args.split} clips per emotion; too few for: "
                         + ", ".join(f"{e} ({len(by_emotion[e])})" for e in short))
    out = _out_dir(args)
    model = load_generator(ckpt, args.device)
    rng = np.random.default_rng(args.seed or 0)
    rows = []
    for audio_emo in EMOTIONS:
        for visual_emo in EMOTIONS:
            picks = rng.choice(len(by_emotion[audio_emo]), size=args.per_pair, replace=False)
            for k, i in enumerate(picks):
                entry = by_emotion[audio_emo][int(i)]
                clip = load_aligned_clip(manifest.path(entry))
                seed = int(rng.integers(0, 2**31 - 1))
                frames = generate(model, clip.audio, clip.video_frames[0], visual_emo, seed)
                name = f"{audio_emo}_{visual_emo}_{k}"
                save_generated(frames, clip.audio[:len(frames) * SAMPLES_PER_FRAME], out, name,
                               {"emotion": visual_emo, "audio_emotion": audio_emo,
                                "source_clip": entry.clip_path, "seed": seed},
                               video=not args.no_video)
                rows.append((f"{name}.mp4" if not args.no_video else name, audio_emo, visual_emo,
                             entry.clip_path))
    with open(out / "stimuli.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STIMULI_HEADER)
        writer.writerows(rows)
    mismatched = sum(a != v for _, a, v, _ in rows)
    print(f"wrote {len(rows)} stimuli ({mismatched} mismatched) -> {out / 'stimuli.csv'}")
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config with model/train/weights sections")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (created if absent)")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("--log-level", default="INFO")
    common.add_argument("--device", default="cpu")

    epilog = _defaults_epilog()
    parser = _Parser(prog="emoface", description=__doc__, epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    def detector_opts(p):
        p.add_argument("--detector", help="landmark detector as module:callable (frame -> 68x2 or None)")
        p.add_argument("--landmarks-dir", help="directory of <stem>.landmarks.npy sidecars")

    p = add("make-template", cmd_make_template, "build per-actor template landmarks")
    p.add_argument("raw_dir")
    detector_opts(p)

    p = add("preprocess", cmd_preprocess, "align raw clips to 25 FPS / 8 kHz / 128x128 and write a manifest")
    p.add_argument("raw_dir")
    detector_opts(p)
    p.add_argument("--audio-dir", help="directory of <stem>.wav files (default: next to videos)")
    p.add_argument("--templates", help="directory of <actor>.npy templates from make-template")
    p.add_argument("--split-file", help="CSV (clip,split) reproducing an external split")
    p.add_argument("--ratios", default="0.70,0.15,0.15")
    p.add_argument("--min-frames", type=int, default=32)

    p = add("train", cmd_train, "train the generator and discriminators")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", choices=("init", "gan"))
    p.add_argument("--init-checkpoint", help="init-stage checkpoint (required for --stage gan)")
    p.add_argument("--resume", help="continue from a checkpoint of the same stage")
    p.add_argument("--steps", type=int, help="iterations to run (default: rest of the stage)")

    p = add("generate", cmd_generate, "generate a talking-face video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True, help="wav file (any rate; resampled to 8 kHz)")
    p.add_argument("--image", required=True)
    p.add_argument("--emotion", help=f"one of: {', '.join(EMOTIONS)}")
    p.add_argument("--all-emotions", action="store_true", help="write one video per emotion")
    p.add_argument("--no-align", action="store_true", help="use the image as-is (resized to 128x128)")
    p.add_argument("--landmarks", help="68x2 .npy landmarks of the image")
    p.add_argument("--template", help="68x2 .npy template to align onto")
    p.add_argument("--detector")

    p = add("evaluate", cmd_evaluate, "PSNR / SSIM / NLMD of generated against ground-truth clips")
    p.add_argument("--gen", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--detector")
    p.add_argument("--align", action="store_true", help="align both videos onto one template first")

    p = add("emoclf", cmd_emoclf, "train/evaluate the video emotion classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classifier", help="existing classifier checkpoint (skips training)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--eval-splits", default="test")
    p.add_argument("--gen", help="directory of generated clips (meta.json carries the emotion)")

    p = add("mismatch", cmd_mismatch, "generate audio/visual emotion-mismatch stimuli")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--per-pair", type=int, default=2)
    p.add_argument("--split", default="test")
    p.add_argument("--no-video", action="store_true", help="skip mp4 encoding")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help, or argument errors (exit 1)
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    from emoface.training import TopologyError, TrainingAborted

    try:
        return args.func(args)
    except (UsageError, ConfigError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingAborted as exc:
        print(f"aborted: {exc} (term: {exc.term}, checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
