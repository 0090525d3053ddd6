from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emoface.data.clips import parse_clip_name
from emoface.emotions import emotion_name

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
HEADER = ("clip_path", "actor_id", "sentence_id", "emotion", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    clip_path: str
    actor_id: str
    sentence_id: str
    emotion: str
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    split_seed: int = 0
    root: Path | None = None
    rejected: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.clip_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HEADER)
            for e in self.entries:
                writer.writerow([e.clip_path, e.actor_id, e.sentence_id, e.emotion, e.split])

    @classmethod
    def read(cls, path, root=None) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != HEADER:
                raise ManifestError(f"{path}: header must be {','.join(HEADER)}")
            entries = [ManifestEntry(r["clip_path"], r["actor_id"], r["sentence_id"],
                                     emotion_name(r["emotion"]), r["split"]) for r in reader]
        for e in entries:
            if e.split not in SPLITS:
                raise ManifestError(f"{path}: unknown split {e.split!r}")
        return cls(entries, root=Path(root) if root else path.parent)


def split_counts(n: int, ratios=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise ManifestError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def _clip_frames(directory: Path) -> int:
    frames = directory / "frames.npy"
    if not frames.exists():
        return -1
    return int(np.load(frames, mmap_mode="r").shape[0])


def _read_split_file(path) -> dict[str, str]:
    """``clip,split`` or manifest-style ``clip_path,...,split`` CSV -> {clip name: split}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        key = "clip_path" if "clip_path" in (reader.fieldnames or []) else "clip"
        if key not in (reader.fieldnames or []) or "split" not in reader.fieldnames:
            raise ManifestError(f"{path}: split file needs 'clip' (or 'clip_path') and 'split' columns")
        mapping = {Path(row[key]).name.split(".")[0]: row["split"].strip().lower() for row in reader}
    bad = {s for s in mapping.values() if s not in SPLITS}
    if bad:
        raise ManifestError(f"{path}: unknown split names {sorted(bad)}")
    return mapping


def build_manifest(root_dir, ratios=(0.70, 0.15, 0.15), seed: int = 0,
                   split_file=None, min_frames: int = 32) -> Manifest:
    """Scan aligned clip directories under ``root_dir`` and assign splits.

    Clips with fewer than ``min_frames`` frames are rejected and logged.
    With ``split_file`` the assignment is copied from it verbatim; clips it
    does not list are rejected.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise ManifestError(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise ManifestError(f"no aligned clips under {root}")

    parsed, rejected = [], []
    for d in dirs:
        try:
            actor, sentence, emotion = parse_clip_name(d.name)
        except ValueError as exc:
            raise ManifestError(f"unparseable clip name {d.name!r}: {exc}") from None
        n = _clip_frames(d)
        if n < min_frames:
            log.warning("rejecting %s: %d frames < %d", d.name, n, min_frames)
            rejected.append(d.name)
            continue
        parsed.append((d.name, actor, sentence, emotion))
    if not parsed:
        raise ManifestError(f"every clip under {root} was rejected")

    if split_file is not None:
        mapping = _read_split_file(split_file)
        assignment = {}
        for name, *_ in parsed:
            if name not in mapping:
                log.warning("rejecting %s: not listed in split file", name)
                rejected.append(name)
            else:
                assignment[name] = mapping[name]
    else:
        order = np.random.default_rng(seed).permutation(len(parsed))
        n_train, n_val, _ = split_counts(len(parsed), ratios)
        assignment = {}
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignment[parsed[i][0]] = split

    entries = [ManifestEntry(name, actor, sentence, emotion, assignment[name])
               for name, actor, sentence, emotion in parsed if name in assignment]
    return Manifest(entries, seed, root, rejected)
