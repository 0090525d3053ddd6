from emoface.evaluation.compare import ComparisonClip, align_for_comparison
from emoface.evaluation.emotion import (EmotionEvalReport, build_classifier, evaluate_emotion_expression,
                                        load_classifier, report_from_predictions, save_classifier,
                                        train_emotion_classifier)
from emoface.evaluation.metrics import PSNR_CAP, MetricReport, evaluate_clip, nlmd, psnr, ssim

__all__ = [
    "ComparisonClip", "EmotionEvalReport", "MetricReport", "PSNR_CAP", "align_for_comparison",
    "build_classifier", "evaluate_clip", "evaluate_emotion_expression", "load_classifier", "nlmd",
    "psnr", "report_from_predictions", "save_classifier", "ssim", "train_emotion_classifier",
]
