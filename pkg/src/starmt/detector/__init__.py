from .checkpoint import (CheckpointError, FingerprintMismatch, checkpoint_bytes, load_checkpoint,
                         save_checkpoint)
from .model import (DenseGrid, Detection, DetectorConfig, Proposals, TinyVOD, VideoPass, affinity,
                    backbone_forward, detect_sequence, detections_from_pass, select_topk,
                    temporal_aggregate, to_tensor)
from .train import (TrainConfig, detection_loss, freeze_proposals, labels_by_frame, proposal_targets,
                    reestimate_norm_stats, tam_loss, train_source, train_tam)

__all__ = [
    "CheckpointError", "FingerprintMismatch", "checkpoint_bytes", "load_checkpoint", "save_checkpoint",
    "DenseGrid", "Detection", "DetectorConfig", "Proposals", "TinyVOD", "VideoPass", "affinity",
    "backbone_forward", "detect_sequence", "detections_from_pass", "select_topk", "temporal_aggregate",
    "to_tensor", "TrainConfig", "detection_loss", "freeze_proposals", "labels_by_frame",
    "proposal_targets", "reestimate_norm_stats", "tam_loss", "train_source", "train_tam",
]
