"""A tiny one-stage video detector.

Per-frame conv backbone -> dense grid (objectness, class, box) -> top-k
proposal selection -> affinity-weighted temporal aggregation that refines
the class scores of the selected proposals.  Objectness and boxes pass
through the aggregation untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..boxes import nms

SCOPES = ("backbone", "tam")


@dataclass(frozen=True)
class DetectorConfig:
    n_classes: int = 4
    widths: tuple[int, int, int, int] = (16, 32, 64, 64)
    tam_hidden: int = 64
    attn_temperature: float = 0.1
    stride: int = 8
    norm: str = "batch"  # BatchNorm after every backbone conv; "group" or "none" as alternatives

    @property
    def d_f(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _conv(cin: int, cout: int, stride: int = 1, norm: str = "none") -> nn.Sequential:
    if norm == "group":
        return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(math.gcd(cout, 8), cout), nn.SiLU())
    if norm == "batch":
        return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.BatchNorm2d(cout), nn.SiLU())
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.SiLU())


class Backbone(nn.Module):
    """Four conv stages (three of them downsampling) plus the dense head."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        w0, w1, w2, w3 = cfg.widths
        n = cfg.norm
        self.stages = nn.Sequential(
            _conv(3, w0, 2, n),
            nn.Sequential(_conv(w0, w1, 2, n), _conv(w1, w1, norm=n)),
            nn.Sequential(_conv(w1, w2, 2, n), _conv(w2, w2, norm=n)),
            nn.Sequential(_conv(w2, w3, norm=n), _conv(w3, w3, norm=n)),
        )
        self.head = nn.Conv2d(w3, 5 + cfg.n_classes, 1)
        nn.init.constant_(self.head.bias[:1], -4.0)  # sparse objectness prior

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.stages((x - 0.5) / 0.25)
        return f, self.head(f)


class TemporalAggregation(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.temperature = cfg.attn_temperature
        self.proj = nn.Sequential(nn.Linear(cfg.d_f, cfg.tam_hidden), nn.SiLU(),
                                  nn.Linear(cfg.tam_hidden, cfg.n_classes))
        # starts as the identity on class scores
        nn.init.zeros_(self.proj[-1].weight)
        nn.init.zeros_(self.proj[-1].bias)

    def forward(self, features: torch.Tensor, cls_logits: torch.Tensor,
                aff: torch.Tensor) -> torch.Tensor:
        weights = torch.softmax(aff / self.temperature, dim=1)
        mixed = weights @ features
        return cls_logits + self.proj(mixed)


@dataclass
class DenseGrid:
    """Raw per-cell predictions for a stack of frames.

    Attributes are ``(T, C, h, w)`` tensors: ``features`` (C = d_f),
    ``obj_logits`` (C = 1), ``cls_logits`` (C = n_c), ``box_reg`` (C = 4,
    centre offsets in cells then log size in strides).
    """
    features: torch.Tensor
    obj_logits: torch.Tensor
    cls_logits: torch.Tensor
    box_reg: torch.Tensor
    stride: int

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def n_cells(self) -> int:
        return self.features.shape[2] * self.features.shape[3]

    @property
    def grid_w(self) -> int:
        return self.features.shape[3]

    def flat(self, name: str) -> torch.Tensor:
        """``(T, n_cells, C)`` view of one field, cells in raster order."""
        x = getattr(self, name)
        T, C = x.shape[:2]
        return x.reshape(T, C, -1).transpose(1, 2)

    def confidence(self) -> torch.Tensor:
        p = torch.sigmoid(self.flat("obj_logits")[..., 0])
        s = torch.sigmoid(self.flat("cls_logits")).amax(dim=-1)
        return p * s

    def decode_boxes(self, frame_idx: torch.Tensor, cell_idx: torch.Tensor) -> torch.Tensor:
        reg = self.flat("box_reg")[frame_idx, cell_idx]
        row = torch.div(cell_idx, self.grid_w, rounding_mode="floor").to(reg.dtype)
        col = (cell_idx % self.grid_w).to(reg.dtype)
        cx = (col + 0.5 + reg[:, 0]) * self.stride
        cy = (row + 0.5 + reg[:, 1]) * self.stride
        w = torch.exp(reg[:, 2].clamp(-4, 4)) * self.stride
        h = torch.exp(reg[:, 3].clamp(-4, 4)) * self.stride
        return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


@dataclass
class Proposals:
    """Selected cells, flattened over frames (frame-major, rank order within a frame)."""
    frame: torch.Tensor  # (N,) long
    cell: torch.Tensor  # (N,) long
    feature: torch.Tensor  # (N, d_f)
    obj_logit: torch.Tensor  # (N,)
    cls_logits: torch.Tensor  # (N, n_c)
    box: torch.Tensor  # (N, 4)

    def __len__(self) -> int:
        return int(self.frame.shape[0])

    @property
    def objectness(self) -> torch.Tensor:
        return torch.sigmoid(self.obj_logit)

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.cls_logits)

    @classmethod
    def gather(cls, grid: DenseGrid, frame: torch.Tensor, cell: torch.Tensor) -> "Proposals":
        return cls(
            frame=frame,
            cell=cell,
            feature=grid.flat("features")[frame, cell],
            obj_logit=grid.flat("obj_logits")[frame, cell, 0],
            cls_logits=grid.flat("cls_logits")[frame, cell],
            box=grid.decode_boxes(frame, cell),
        )


def backbone_forward(frames: torch.Tensor, model: "TinyVOD") -> tuple[torch.Tensor, DenseGrid]:
    """Run the single-frame part of ``model`` on ``(T, 3, H, W)`` frames in [0, 1]."""
    stride = model.config.stride
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected (T, 3, H, W) frames, got {tuple(frames.shape)}")
    if frames.shape[2] % stride or frames.shape[3] % stride:
        raise ValueError(f"frame size {tuple(frames.shape[2:])} not divisible by stride {stride}")
    f, out = model.backbone(frames)
    n_c = model.config.n_classes
    grid = DenseGrid(features=f, obj_logits=out[:, :1], cls_logits=out[:, 1:1 + n_c],
                     box_reg=out[:, 1 + n_c:], stride=stride)
    return f, grid


def select_topk(grid: DenseGrid, k: int) -> Proposals:
    """Per frame, the ``k`` cells with the highest ``p * max_c s``.

    Ties go to the earlier cell in raster order.  ``k`` larger than the
    number of cells per frame selects every cell.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    k = min(k, grid.n_cells)
    with torch.no_grad():
        conf = grid.confidence()
        # stable descending sort keeps raster order among equal scores
        order = torch.sort(conf, dim=1, descending=True, stable=True).indices[:, :k]
    frame = torch.arange(grid.T).repeat_interleave(k)
    return Proposals.gather(grid, frame, order.reshape(-1))


def affinity(features: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between proposal features.

    Zero-norm rows are similar to nothing but themselves; the diagonal is
    exactly one.
    """
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("affinity needs a non-empty (N, d) feature matrix")
    norm = features.norm(dim=1, keepdim=True)
    unit = torch.where(norm > 0, features / norm.clamp_min(1e-12), torch.zeros_like(features))
    aff = unit @ unit.T
    eye = torch.eye(len(features), dtype=aff.dtype, device=aff.device, requires_grad=False)
    return aff * (1 - eye) + eye


def temporal_aggregate(props: Proposals, aff: torch.Tensor, tam: TemporalAggregation) -> torch.Tensor:
    """Refined class logits of every proposal; objectness and boxes are left as they are."""
    n = len(props)
    if aff.shape != (n, n):
        raise ValueError(f"affinity shape {tuple(aff.shape)} does not match {n} proposals")
    return tam(props.feature, props.cls_logits, aff)


@dataclass
class VideoPass:
    features: torch.Tensor
    grid: DenseGrid
    props: Proposals
    refined_logits: torch.Tensor

    @property
    def refined_scores(self) -> torch.Tensor:
        return torch.sigmoid(self.refined_logits)


class TinyVOD(nn.Module):
    def __init__(self, config: DetectorConfig | None = None):
        super().__init__()
        self.config = config or DetectorConfig()
        self.backbone = Backbone(self.config)
        self.tam = TemporalAggregation(self.config)
        self.meta: dict = {}

    def scope_of(self, name: str) -> str:
        return "tam" if name.startswith("tam.") else "backbone"

    def scoped_parameters(self, scope: str):
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        return [p for n, p in self.named_parameters() if self.scope_of(n) == scope]

    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def video_forward(self, frames: torch.Tensor, k: int, at: tuple[torch.Tensor, torch.Tensor] | None = None
                      ) -> VideoPass:
        """Full pass over one sequence.

        Args:
            frames: ``(T, 3, H, W)``.
            k: proposals per frame.
            at: optional ``(frame, cell)`` indices; when given, these cells
                are used as the proposals instead of this model's own top-k.
        """
        f, grid = backbone_forward(frames, self)
        props = select_topk(grid, k) if at is None else Proposals.gather(grid, *at)
        refined = temporal_aggregate(props, affinity(props.feature), self.tam)
        return VideoPass(f, grid, props, refined)


def to_tensor(frames: np.ndarray) -> torch.Tensor:
    """``(T, H, W, 3)`` numpy frames -> ``(T, 3, H, W)`` float tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


@dataclass(frozen=True)
class Detection:
    frame: int
    class_id: int
    confidence: float
    box: tuple[float, float, float, float]


def detections_from_pass(vp: VideoPass, nms_iou: float = 0.5, conf_thresh: float = 0.05) -> list[Detection]:
    props = vp.props
    p = props.objectness.detach().double().numpy()
    s = vp.refined_scores.detach().double().numpy()
    conf = p * s.max(axis=1)
    cls = s.argmax(axis=1)
    boxes = props.box.detach().double().numpy()
    frames = props.frame.numpy()
    out = []
    for t in np.unique(frames):
        idx = np.flatnonzero((frames == t) & (conf >= conf_thresh))
        for j in idx[nms(boxes[idx], conf[idx], nms_iou)]:
            out.append(Detection(int(t), int(cls[j]), float(conf[j]), tuple(float(v) for v in boxes[j])))
    return out


@torch.no_grad()
def detect_sequence(frames, model: TinyVOD, k: int = 30, nms_iou: float = 0.5,
                    conf_thresh: float = 0.05) -> list[Detection]:
    """Detections for one sequence: backbone, top-k, aggregation, per-frame NMS."""
    if isinstance(frames, np.ndarray):
        frames = to_tensor(frames)
    was_training = model.training
    model.eval()
    vp = model.video_forward(frames.to(next(model.parameters()).dtype), k)
    model.train(was_training)
    return detections_from_pass(vp, nms_iou, conf_thresh)
