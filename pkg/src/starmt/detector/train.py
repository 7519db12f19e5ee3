"""Supervised training: the source detector and the TAM-only fine-tuning path."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..boxes import iou_matrix
from ..datagen import BoxLabel, VideoDataset, VideoSequence
from .model import (DenseGrid, DetectorConfig, Proposals, TinyVOD, affinity, backbone_forward,
                    select_topk, temporal_aggregate, to_tensor)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    backbone_iters: int = 1500
    tam_iters: int = 600
    seqs_per_batch: int = 2
    lr: float = 2e-3
    tam_lr: float = 2e-3
    weight_decay: float = 1e-4
    k: int = 30
    match_iou: float = 0.5
    log_every: int = 50
    augment: bool = True
    detector: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ----------------------------------------------------------------------------
# targets and losses


def grid_targets(labels: Sequence[Sequence[BoxLabel]], T: int, gh: int, gw: int, stride: int,
                 n_classes: int, dtype=torch.float32):
    """Dense targets: the cell holding a box centre is positive.

    When two boxes share a cell the larger one wins.

    Returns:
        ``(obj, cls, box, pos)`` of shapes ``(T, gh*gw)``, ``(T, gh*gw, n_c)``,
        ``(T, gh*gw, 4)`` and a boolean positive mask ``(T, gh*gw)``.
    """
    n = gh * gw
    obj = torch.zeros(T, n, dtype=dtype)
    cls = torch.zeros(T, n, n_classes, dtype=dtype)
    box = torch.zeros(T, n, 4, dtype=dtype)
    for t in range(T):
        for lab in sorted(labels[t], key=lambda b: (b.box[2] - b.box[0]) * (b.box[3] - b.box[1])):
            x1, y1, x2, y2 = lab.box
            cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
            col = min(max(int(cx // stride), 0), gw - 1)
            row = min(max(int(cy // stride), 0), gh - 1)
            c = row * gw + col
            obj[t, c] = 1.0
            cls[t, c] = 0.0
            cls[t, c, lab.class_id] = 1.0
            box[t, c] = torch.tensor([cx / stride - col - 0.5, cy / stride - row - 0.5,
                                      math.log(w / stride), math.log(h / stride)], dtype=dtype)
    return obj, cls, box, obj > 0


def detection_loss(grid: DenseGrid, labels: Sequence[Sequence[BoxLabel]]) -> dict[str, torch.Tensor]:
    """BCE objectness + BCE one-hot class + L1 box, normalised by the positive count."""
    T = grid.T
    gh, gw = grid.features.shape[2:]
    n_c = grid.cls_logits.shape[1]
    obj_t, cls_t, box_t, pos = grid_targets(labels, T, gh, gw, grid.stride, n_c, grid.features.dtype)
    n_pos = max(int(pos.sum()), 1)
    obj = grid.flat("obj_logits")[..., 0]
    cls = grid.flat("cls_logits")
    reg = grid.flat("box_reg")
    l_obj = F.binary_cross_entropy_with_logits(obj, obj_t, reduction="sum") / n_pos
    l_cls = F.binary_cross_entropy_with_logits(cls[pos], cls_t[pos], reduction="sum") / n_pos
    l_box = (reg[pos] - box_t[pos]).abs().sum() / n_pos
    return {"total": l_obj + l_cls + l_box, "obj": l_obj, "cls": l_cls, "box": l_box}


def proposal_targets(props: Proposals, labels: Sequence[Sequence[BoxLabel]], n_classes: int,
                     match_iou: float = 0.5) -> torch.Tensor:
    """One-hot class target for proposals whose box overlaps a label by ``match_iou``; zeros otherwise."""
    tgt = torch.zeros(len(props), n_classes, dtype=props.cls_logits.dtype)
    boxes = props.box.detach().double().numpy()
    frames = props.frame.numpy()
    for t in np.unique(frames):
        labs = labels[t]
        if not labs:
            continue
        idx = np.flatnonzero(frames == t)
        ious = iou_matrix(boxes[idx], np.array([lab.box for lab in labs]))
        best = ious.argmax(axis=1)
        for row, j in enumerate(idx):
            if ious[row, best[row]] >= match_iou:
                tgt[j, labs[best[row]].class_id] = 1.0
    return tgt


def tam_loss(refined_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(refined_logits, targets, reduction="sum") / max(len(targets), 1)


def labels_by_frame(seq: VideoSequence) -> list[list[BoxLabel]]:
    out: list[list[BoxLabel]] = [[] for _ in range(seq.T)]
    for lab in seq.labels or []:
        if lab.frame < seq.T:
            out[lab.frame].append(lab)
    return out


def _shift_labels(labels: list[list[BoxLabel]], dx: int, dy: int, W: int, H: int, flip: bool,
                  min_visible: float = 0.5) -> list[list[BoxLabel]]:
    out = []
    for frame in labels:
        kept = []
        for b in frame:
            x1, y1, x2, y2 = b.box
            if flip:
                x1, x2 = W - x2, W - x1
            x1, x2, y1, y2 = x1 + dx, x2 + dx, y1 + dy, y2 + dy
            cx1, cy1, cx2, cy2 = max(x1, 0), max(y1, 0), min(x2, W), min(y2, H)
            if cx2 <= cx1 or cy2 <= cy1:
                continue
            if (cx2 - cx1) * (cy2 - cy1) < min_visible * (x2 - x1) * (y2 - y1):
                continue
            kept.append(BoxLabel(b.frame, b.class_id, (cx1, cy1, cx2, cy2), b.track_id))
        out.append(kept)
    return out


def augment_source(frames: np.ndarray, labels: list[list[BoxLabel]], rng: np.random.Generator,
                   max_shift: int = 16, jitter: float = 0.2):
    """Flip, channel shuffle, brightness/contrast jitter and an edge-padded translation, same for all frames."""
    T, H, W, _ = frames.shape
    flip = bool(rng.random() < 0.5)
    x = frames[:, :, ::-1] if flip else frames
    x = x[..., rng.permutation(3)]
    b, c = rng.uniform(1 - jitter, 1 + jitter, size=2)
    mean = x.mean()
    x = np.clip((x * b - mean * b) * c + mean * b, 0.0, 1.0)
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    x = np.pad(x, ((0, 0), (max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="edge")
    x = x[:, max_shift - dy:max_shift - dy + H, max_shift - dx:max_shift - dx + W]
    return np.ascontiguousarray(x, dtype=np.float32), _shift_labels(labels, dx, dy, W, H, flip)


# ----------------------------------------------------------------------------
# TAM-only training on frozen proposals


@dataclass
class FrozenProposals:
    """Backbone outputs at the top-k cells of one sequence; reusable while the backbone is frozen."""
    props: Proposals
    targets: torch.Tensor | None = None


@torch.no_grad()
def freeze_proposals(model: TinyVOD, seq: VideoSequence, k: int) -> FrozenProposals:
    model.eval()
    _, grid = backbone_forward(to_tensor(seq.frames), model)
    return FrozenProposals(select_topk(grid, k))


@torch.no_grad()
def reestimate_norm_stats(model: TinyVOD, sequences) -> int:
    """Recompute BatchNorm running statistics as plain averages over ``sequences``.

    Learnable parameters are untouched.  Each sequence is one batch of its
    frames.  Returns the number of normalisation layers refreshed (zero for
    models without BatchNorm, which are left exactly as they were).
    """
    layers = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not layers:
        return 0
    saved = [m.momentum for m in layers]
    for m in layers:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    model.train()
    for seq in sequences:
        model.backbone(to_tensor(seq.frames))
    for m, mom in zip(layers, saved):
        m.momentum = mom
    model.eval()
    return len(layers)


def train_tam(model: TinyVOD, items: Sequence[FrozenProposals], iters: int, lr: float,
              rng: np.random.Generator, weight_decay: float = 0.0, callback=None) -> list[float]:
    """Fit only the TAM parameters against precomputed proposal targets.

    ``callback(it, model, loss)`` runs after every step.
    """
    if not items:
        raise ValueError("no training sequences")
    params = model.scoped_parameters("tam")
    backbone_before = [p.detach().clone() for p in model.scoped_parameters("backbone")]
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    curve = []
    model.train()
    for it in range(iters):
        item = items[int(rng.integers(len(items)))]
        props = item.props
        refined = temporal_aggregate(props, affinity(props.feature), model.tam)
        loss = tam_loss(refined, item.targets)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if callback is not None:
            callback(it, model, curve[-1])
    for before, p in zip(backbone_before, model.scoped_parameters("backbone")):
        assert torch.equal(before, p.detach()), "backbone moved during TAM training"
    return curve


# ----------------------------------------------------------------------------
# source training


def train_source(dataset: VideoDataset, config: TrainConfig | None = None, seed: int = 0,
                 out_dir: str | Path | None = None, tam_dataset: VideoDataset | None = None) -> TinyVOD:
    """Two-phase supervised training on labelled clean data.

    Phase one trains backbone and head with :func:`detection_loss` on
    ``seqs_per_batch`` sequences per step, each passed through
    :func:`augment_source` unless ``config.augment`` is off.  Phase two
    freezes them and trains the TAM on the top-k proposals, a proposal
    counting as an object when its box matches a label at IoU >= 0.5.

    Args:
        tam_dataset: sequences for phase two.  Held-out sequences let the
            TAM see the kind of single-frame mistakes the backbone makes on
            unseen data; by default phase two reuses ``dataset``.
    """
    from .checkpoint import save_checkpoint

    cfg = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    det_cfg = DetectorConfig.from_dict({"n_classes": dataset.manifest.n_classes, **cfg.detector})
    model = TinyVOD(det_cfg)
    curve_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        curve_fh = open(out_dir / "train_curve.jsonl", "w")

    opt = torch.optim.AdamW(model.scoped_parameters("backbone"), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.backbone_iters, 1), eta_min=cfg.lr * 0.05)
    model.train()
    for it in range(cfg.backbone_iters):
        frames, labels = [], []
        for _ in range(cfg.seqs_per_batch):
            seq = dataset[int(rng.integers(len(dataset)))]
            x, labs = seq.frames, labels_by_frame(seq)
            if cfg.augment:
                x, labs = augment_source(x, labs, rng)
            frames.append(x)
            labels.extend(labs)
        _, grid = backbone_forward(to_tensor(np.concatenate(frames)), model)
        losses = detection_loss(grid, labels)
        opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        opt.step()
        sched.step()
        if curve_fh and (it % cfg.log_every == 0 or it == cfg.backbone_iters - 1):
            curve_fh.write(json.dumps({"phase": "backbone", "iter": it,
                                       **{k: float(v.detach()) for k, v in losses.items()}}) + "\n")
        if it % cfg.log_every == 0:
            log.info("source it %d loss %.4f", it, losses["total"].item())

    items = []
    tam_data = dataset if tam_dataset is None or len(tam_dataset) == 0 else tam_dataset
    for seq in tam_data:
        fp = freeze_proposals(model, seq, cfg.k)
        fp.targets = proposal_targets(fp.props, labels_by_frame(seq), det_cfg.n_classes, cfg.match_iou)
        items.append(fp)

    def _log_tam(it, _model, loss):
        if curve_fh and (it % cfg.log_every == 0 or it == cfg.tam_iters - 1):
            curve_fh.write(json.dumps({"phase": "tam", "iter": it, "total": loss}) + "\n")

    train_tam(model, items, cfg.tam_iters, cfg.tam_lr, rng, callback=_log_tam)
    model.eval()
    model.meta = {"kind": "source", "seed": seed, "train_config": asdict(cfg),
                  "dataset": dataset.name, "tam_dataset": tam_data.name}
    if curve_fh:
        curve_fh.close()
        save_checkpoint(model, out_dir / "source.ckpt")
    return model
