"""The alternating teacher-student adaptation loop."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..datagen import DatasetManifest, VideoDataset
from ..detector.model import Proposals, TinyVOD, backbone_forward, to_tensor
from .augment import AugmentConfig, augment_pair
from .ema import TeacherStudent, ema_update
from .entropy import EntropyTrace, mean_self_entropy, select_checkpoint
from .losses import LOSS_TERMS, srs_loss, trs_loss
from .schedule import SRS, TRS, cosine_lr, mask_frames, stage_of

log = logging.getLogger(__name__)


@dataclass
class AdaptationConfig:
    alpha: float = 0.9995
    gamma: float = 0.2
    tau: int = 200
    total_iters: int = 10000
    k: int = 30
    mask_range: tuple[float, float] = (0.0, 75.0)
    lr: float = 2e-4
    lr_min: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    frames_per_sequence: int = 32
    entropy_window: int = 100
    stage_order: str = TRS
    selection: str = "first_local_min"
    loss_terms: tuple[str, ...] = LOSS_TERMS
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    # TAM-only baselines
    pl_threshold: float = 0.5
    tam_iters: int = 600
    tam_lr: float = 1e-3
    # "target": BatchNorm statistics of the frozen backbone are re-estimated on the
    # target train frames before TAM-only fitting; "source": kept as trained
    baseline_norm_stats: str = "target"

    def validate(self) -> None:
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.total_iters and 2 * self.tau > self.total_iters:
            raise ValueError(f"2 * tau ({2 * self.tau}) exceeds total_iters ({self.total_iters})")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        lo, hi = self.mask_range
        if not 0 <= lo <= hi <= 75:
            raise ValueError("mask_range must lie within [0, 75]")
        if self.entropy_window < 1:
            raise ValueError("entropy_window must be >= 1")
        if self.baseline_norm_stats not in ("target", "source"):
            raise ValueError("baseline_norm_stats must be 'target' or 'source'")
        bad = set(self.loss_terms) - set(LOSS_TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        for key in ("mask_range", "loss_terms"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class AdaptResult:
    model: TinyVOD
    trace: EntropyTrace
    records: list[dict]
    selected_iter: int | None
    snapshots: dict[int, dict] = field(default_factory=dict, repr=False)
    snapshot_metrics: dict[int, float] = field(default_factory=dict)
    final_teacher: TinyVOD | None = None

    def teacher_at(self, iteration: int) -> TinyVOD:
        model = copy.deepcopy(self.model)
        model.load_state_dict(self.snapshots[iteration])
        return model


def label_blind(target: DatasetManifest | VideoDataset, split: str = "train") -> VideoDataset:
    """A view of the target split that never opens label files."""
    if isinstance(target, VideoDataset):
        if not target.with_labels:
            return target
        return VideoDataset(target.manifest, target.split, with_labels=False, max_frames=target.max_frames)
    return VideoDataset(target, split, with_labels=False)


def _window(frames: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if frames.shape[0] <= n:
        return frames
    start = int(rng.integers(frames.shape[0] - n + 1))
    return frames[start:start + n]


def _trs_step(ts: TeacherStudent, strong, tpass, keep, cfg: AdaptationConfig):
    t_frame, t_cell = tpass.props.frame, tpass.props.cell
    keep_t = torch.from_numpy(keep)
    sel = torch.isin(t_frame, keep_t)
    pos = torch.searchsorted(keep_t, t_frame[sel])
    spass = ts.student.video_forward(strong[keep_t], cfg.k, at=(pos, t_cell[sel]))
    return trs_loss(tpass.features[keep_t], spass.features, tpass.refined_scores[sel],
                    spass.refined_scores, cfg.loss_terms)


def _srs_step(ts: TeacherStudent, strong, tpass, cfg: AdaptationConfig):
    f_s, grid = backbone_forward(strong, ts.student)
    props = Proposals.gather(grid, tpass.props.frame, tpass.props.cell)
    return srs_loss(tpass.features, f_s, tpass.refined_scores, props.scores, props.objectness,
                    cfg.gamma, cfg.loss_terms)


def adapt(source: TinyVOD, target: DatasetManifest | VideoDataset, config: AdaptationConfig | None = None,
          out_dir: str | Path | None = None, force_stage: str | None = None,
          on_snapshot: Callable[[int, TinyVOD], float | None] | None = None) -> AdaptResult:
    """Adapt ``source`` to the unlabelled target train split.

    Each iteration draws one sequence, builds its weak / strong views and
    runs the stage given by :func:`stage_of` (or ``force_stage``).  TRS
    masks student frames, trains on :func:`trs_loss` and EMA-updates the
    whole teacher; SRS trains on :func:`srs_loss` and EMA-updates only the
    teacher backbone.  The teacher's mean self-entropy on the current
    sequence is traced, the teacher is snapshotted every
    ``entropy_window`` iterations, and the snapshot picked by
    :func:`select_checkpoint` is returned.

    ``on_snapshot(iteration, teacher)`` may return a score that is kept in
    ``snapshot_metrics`` (e.g. held-out AP50 for diagnostics).
    """
    cfg = config or AdaptationConfig()
    cfg.validate()
    data = label_blind(target)
    if len(data) == 0:
        raise ValueError("empty target split")
    trace = EntropyTrace(window=cfg.entropy_window)
    if cfg.total_iters == 0:
        model = copy.deepcopy(source)
        return AdaptResult(model, trace, [], None, final_teacher=model)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    ts = TeacherStudent.from_source(source, cfg.alpha)
    opt = torch.optim.SGD(ts.student.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.jsonl", "w")

    records: list[dict] = []
    snapshots: dict[int, dict] = {}
    snap_metrics: dict[int, float] = {}
    h_sum = []
    for it in range(cfg.total_iters):
        seq = data[int(rng.integers(len(data)))]
        frames = _window(seq.frames, cfg.frames_per_sequence, rng)
        weak, strong, _ = augment_pair(frames, rng, cfg.augment)
        stage = force_stage or stage_of(it, cfg.tau, cfg.stage_order)

        with torch.no_grad():
            tpass = ts.teacher.video_forward(weak, cfg.k)
        h = mean_self_entropy(tpass.refined_scores)
        trace.append(it, h)
        h_sum.append(h)
        if it % cfg.entropy_window == 0:
            snapshots[it] = {k: v.detach().clone() for k, v in ts.teacher.state_dict().items()}
            if on_snapshot is not None:
                score = on_snapshot(it, ts.teacher)
                if score is not None:
                    snap_metrics[it] = float(score)

        lr = cosine_lr(it, cfg.total_iters, cfg.lr, cfg.lr_min)
        for g in opt.param_groups:
            g["lr"] = lr
        r = 0.0
        if stage == TRS:
            r = float(rng.uniform(*cfg.mask_range))
            keep = mask_frames(strong.shape[0], r, rng)
            losses = _trs_step(ts, strong, tpass, keep, cfg)
        elif stage == SRS:
            losses = _srs_step(ts, strong, tpass, cfg)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        opt.zero_grad(set_to_none=True)
        losses["total"].backward()
        opt.step()
        ema_update(ts, "all" if stage == TRS else "backbone_only")

        vals = {name: losses[name].item() for name in ("total", "mse", "bce", "cls")}
        rec = {"iter": it, "stage": stage, "loss_total": vals["total"],
               "loss_mse": vals["mse"], "loss_bce": vals["bce"],
               "loss_cls": vals["cls"], "H_raw": h,
               "H_smoothed": float(np.mean(h_sum[-cfg.entropy_window:])), "lr": lr, "r_mask": r}
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
        if it % 100 == 0:
            log.info("adapt it %d %s loss %.4f H %.4f", it, stage, rec["loss_total"], h)
    if fh:
        fh.close()

    selected = select_checkpoint(trace, snapshot_every=cfg.entropy_window, rule=cfg.selection)
    best = copy.deepcopy(ts.teacher)
    best.load_state_dict(snapshots[selected])
    best.meta = {"kind": "adapted", "selected_iter": selected, "alpha": cfg.alpha, "seed": cfg.seed}
    final = copy.deepcopy(ts.teacher)
    for m in (best, final):
        for p in m.parameters():
            p.requires_grad_(True)
        m.eval()
    return AdaptResult(best, trace, records, selected, snapshots, snap_metrics, final)
