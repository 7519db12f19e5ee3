"""Reference adaptation procedures: pseudo-labelling, TRS-only mean teacher, supervised oracle."""

from __future__ import annotations

import copy
import logging

import numpy as np
import torch

from ..datagen import BoxLabel, DatasetManifest, VideoDataset
from ..detector.model import TinyVOD, affinity, detections_from_pass, temporal_aggregate, to_tensor
from ..detector.train import (FrozenProposals, freeze_proposals, labels_by_frame, proposal_targets,
                              reestimate_norm_stats, train_tam)
from .adapt import AdaptationConfig, AdaptResult, adapt, label_blind
from .entropy import EntropyTrace, mean_self_entropy, select_checkpoint
from .schedule import TRS

log = logging.getLogger(__name__)


class PseudoLabelError(RuntimeError):
    pass


def baseline_basic_mt(source: TinyVOD, target, config: AdaptationConfig | None = None, **kw) -> AdaptResult:
    """Plain mean teacher: every iteration is a TRS step with a full-model EMA."""
    return adapt(source, target, config, force_stage=TRS, **kw)


@torch.no_grad()
def generate_pseudo_labels(model: TinyVOD, data: VideoDataset, threshold: float, k: int) -> list[list[list[BoxLabel]]]:
    """Per sequence, per frame: top-k proposals with ``p * max_c s >= threshold`` as box labels."""
    model.eval()
    out = []
    for seq in data:
        vp = model.video_forward(to_tensor(seq.frames), k)
        frames: list[list[BoxLabel]] = [[] for _ in range(seq.T)]
        for d in detections_from_pass(vp, nms_iou=1.0, conf_thresh=threshold):
            frames[d.frame].append(BoxLabel(d.frame, d.class_id, d.box, -1))
        out.append(frames)
    return out


def _frozen_backbone_copy(source: TinyVOD, data: VideoDataset, cfg: AdaptationConfig) -> TinyVOD:
    model = copy.deepcopy(source)
    if cfg.baseline_norm_stats == "target":
        n = reestimate_norm_stats(model, data)
        log.info("re-estimated %d normalisation layers on %d target sequences", n, len(data))
    model.eval()
    return model


def _tam_with_entropy_selection(model: TinyVOD, items: list[FrozenProposals], cfg: AdaptationConfig,
                                rng: np.random.Generator) -> tuple[TinyVOD, EntropyTrace, int]:
    trace = EntropyTrace(window=cfg.entropy_window)
    snaps: dict[int, dict] = {}

    def _track(it, m, _loss):
        # entropy of the model after step ``it`` on a fixed probe sequence set
        item = items[it % len(items)]
        with torch.no_grad():
            scores = torch.sigmoid(temporal_aggregate(item.props, affinity(item.props.feature), m.tam))
        trace.append(it, mean_self_entropy(scores))
        if it % cfg.entropy_window == 0:
            snaps[it] = {k: v.detach().clone() for k, v in m.tam.state_dict().items()}

    train_tam(model, items, cfg.tam_iters, cfg.tam_lr, rng, callback=_track)
    selected = select_checkpoint(trace, snapshot_every=cfg.entropy_window, rule=cfg.selection)
    model.tam.load_state_dict(snaps[selected])
    return model, trace, selected


def baseline_pseudo_label(source: TinyVOD, target: DatasetManifest | VideoDataset,
                          config: AdaptationConfig | None = None) -> AdaptResult:
    """Pseudo-label the target once with the source model, then fit the TAM only.

    Labels are the source model's top-k proposals whose ``p * max_c s``
    reaches ``config.pl_threshold``.  Backbone parameters stay frozen (with
    ``baseline_norm_stats="target"`` its BatchNorm statistics are first
    re-estimated on the unlabelled target frames); among TAM
    snapshots taken every ``entropy_window`` steps the one chosen by
    :func:`select_checkpoint` on the training entropy is returned.
    """
    cfg = config or AdaptationConfig()
    data = label_blind(target)
    if len(data) == 0:
        raise ValueError("empty target split")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = _frozen_backbone_copy(source, data, cfg)
    pseudo = generate_pseudo_labels(model, data, cfg.pl_threshold, cfg.k)
    n_labels = sum(len(f) for seq in pseudo for f in seq)
    if n_labels == 0:
        raise PseudoLabelError(
            f"no proposal reached the pseudo-label threshold {cfg.pl_threshold} on {len(data)} sequences")
    log.info("pseudo labels: %d over %d sequences", n_labels, len(data))
    items = []
    for seq, labels in zip(data, pseudo):
        fp = freeze_proposals(model, seq, cfg.k)
        fp.targets = proposal_targets(fp.props, labels, model.config.n_classes)
        items.append(fp)
    model, trace, selected = _tam_with_entropy_selection(model, items, cfg, rng)
    model.eval()
    model.meta = {"kind": "pseudo_label", "n_pseudo_labels": n_labels, "selected_iter": selected}
    return AdaptResult(model, trace, [], selected, final_teacher=model)


def oracle_finetune(source: TinyVOD, target: DatasetManifest | VideoDataset,
                    config: AdaptationConfig | None = None) -> AdaptResult:
    """Supervised TAM-only fine-tuning on the labelled target train split (upper reference).

    Backbone parameters are frozen; their normalisation statistics follow
    ``config.baseline_norm_stats`` as in :func:`baseline_pseudo_label`.
    """
    cfg = config or AdaptationConfig()
    data = target if isinstance(target, VideoDataset) else VideoDataset(target, "train", with_labels=True)
    if not data.with_labels:
        raise ValueError("oracle fine-tuning needs a labelled dataset")
    if len(data) == 0:
        raise ValueError("empty target split")
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    model = _frozen_backbone_copy(source, data, cfg)
    items = []
    n_labels = 0
    for seq in data:
        fp = freeze_proposals(model, seq, cfg.k)
        fp.targets = proposal_targets(fp.props, labels_by_frame(seq), model.config.n_classes)
        n_labels += len(seq.labels or [])
        items.append(fp)
    if n_labels == 0:
        raise ValueError("target split carries no labels")
    curve = train_tam(model, items, cfg.tam_iters, cfg.tam_lr, rng)
    model.eval()
    model.meta = {"kind": "oracle", "final_loss": curve[-1] if curve else None}
    return AdaptResult(model, EntropyTrace(cfg.entropy_window), [{"tam_loss": v} for v in curve], None,
                       final_teacher=model)
