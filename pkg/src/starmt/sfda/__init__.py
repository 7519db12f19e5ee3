from .adapt import AdaptationConfig, AdaptResult, adapt, label_blind
from .augment import AugmentConfig, AugRecord, augment_pair, transform_boxes, warp_frames
from .baselines import (PseudoLabelError, baseline_basic_mt, baseline_pseudo_label, generate_pseudo_labels,
                        oracle_finetune)
from .ema import TeacherStudent, ema_update
from .entropy import EntropyTrace, mean_self_entropy, select_checkpoint
from .losses import certainty_weighted_cls_loss, feature_mse, soft_bce, srs_loss, trs_loss
from .schedule import SRS, TRS, cosine_lr, mask_frames, stage_of

__all__ = [
    "AdaptationConfig", "AdaptResult", "adapt", "label_blind", "AugmentConfig", "AugRecord", "augment_pair",
    "transform_boxes", "warp_frames", "PseudoLabelError", "baseline_basic_mt", "baseline_pseudo_label",
    "generate_pseudo_labels", "oracle_finetune", "TeacherStudent", "ema_update", "EntropyTrace",
    "mean_self_entropy", "select_checkpoint", "certainty_weighted_cls_loss", "feature_mse", "soft_bce",
    "srs_loss", "trs_loss", "SRS", "TRS", "cosine_lr", "mask_frames", "stage_of",
]
