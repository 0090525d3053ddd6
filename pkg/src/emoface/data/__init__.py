from emoface.data.align import ClipRejected, align_clip, key_points, make_template, symmetry_score
from emoface.data.augment import AugmentConfig, augment
from emoface.data.clips import AlignedClip, RawClip, load_aligned_clip, save_aligned_clip
from emoface.data.manifest import Manifest, ManifestEntry, ManifestError, build_manifest
from emoface.data.mrm import MouthRegionMask, compute_mrm
from emoface.data.similarity import DegenerateGeometryError, SimilarityTransform, estimate_similarity
from emoface.data.window import ClipStore, TrainingWindow, sample_window

__all__ = [
    "AlignedClip", "AugmentConfig", "ClipRejected", "ClipStore", "DegenerateGeometryError",
    "Manifest", "ManifestEntry", "ManifestError", "MouthRegionMask", "RawClip",
    "SimilarityTransform", "TrainingWindow", "align_clip", "augment", "build_manifest",
    "compute_mrm", "estimate_similarity", "key_points", "load_aligned_clip", "make_template",
    "sample_window", "save_aligned_clip", "symmetry_score",
]
