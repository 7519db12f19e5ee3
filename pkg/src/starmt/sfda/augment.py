"""Weak / strong augmentation pairs sharing one geometric transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..detector.model import to_tensor


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    perspective: float = 0.05  # max corner shift, fraction of frame size
    weak_jitter: float = 0.1
    strong_jitter: float = 0.4
    erase_prob: float = 1.0
    erase_area: tuple[float, float] = (0.02, 0.15)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=0.0, perspective=0.0, weak_jitter=0.0, strong_jitter=0.0, erase_prob=0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "erase_area" in d:
            d["erase_area"] = tuple(d["erase_area"])
        return cls(**d)


@dataclass
class AugRecord:
    """What was done: ``matrix`` maps input pixel coordinates to output ones."""
    matrix: np.ndarray
    flipped: bool
    weak_color: tuple[float, float, float]
    strong_color: tuple[float, float, float]
    erase_box: tuple[int, int, int, int] | None  # x1, y1, x2, y2 in output pixels


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points onto ``dst``."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(A, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def warp_frames(frames: torch.Tensor, matrix: np.ndarray) -> torch.Tensor:
    """Resample ``(T, C, H, W)`` frames so that input point ``x`` lands at ``matrix @ x``.

    Bilinear, border replication; pixel centres sit at half-integers.
    """
    T, C, H, W = frames.shape
    inv = np.linalg.inv(matrix)
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(H * W)])
    src = inv @ pts
    sx, sy = src[0] / src[2], src[1] / src[2]
    grid = np.stack([2 * sx / W - 1, 2 * sy / H - 1], axis=-1).reshape(1, H, W, 2)
    grid = torch.from_numpy(grid).to(frames.dtype).expand(T, H, W, 2)
    return F.grid_sample(frames, grid, mode="bilinear", padding_mode="border", align_corners=False)


def transform_boxes(boxes: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of each ``(x1, y1, x2, y2)`` box after ``matrix``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(boxes)
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        pts = np.array([[x1, x2, x2, x1], [y1, y1, y2, y2], [1, 1, 1, 1]])
        q = matrix @ pts
        qx, qy = q[0] / q[2], q[1] / q[2]
        out[i] = [qx.min(), qy.min(), qx.max(), qy.max()]
    return out


def _color(frames: torch.Tensor, b: float, c: float, s: float) -> torch.Tensor:
    if b == c == s == 1.0:
        return frames
    x = frames * b
    mean = x.mean()
    x = (x - mean) * c + mean
    gray = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).unsqueeze(1)
    x = gray + (x - gray) * s
    return x.clamp(0.0, 1.0)


def _draw_color(rng: np.random.Generator, m: float) -> tuple[float, float, float]:
    if m <= 0:
        return (1.0, 1.0, 1.0)
    return tuple(float(v) for v in rng.uniform(1 - m, 1 + m, size=3))


def _draw_erase(rng: np.random.Generator, H: int, W: int, area: tuple[float, float]):
    for _ in range(20):
        a = rng.uniform(*area) * H * W
        ratio = np.exp(rng.uniform(np.log(0.3), np.log(1 / 0.3)))
        h = int(round(np.sqrt(a * ratio)))
        w = int(round(np.sqrt(a / ratio)))
        if 0 < h <= H and 0 < w <= W and area[0] <= h * w / (H * W) <= area[1]:
            y = int(rng.integers(0, H - h + 1))
            x = int(rng.integers(0, W - w + 1))
            return (x, y, x + w, y + h)
    return None


def augment_pair(frames, rng: np.random.Generator, config: AugmentConfig | None = None):
    """Build the teacher (weak) and student (strong) views of one sequence.

    Both views share a horizontal flip and a perspective warp; they differ
    in the strength of the brightness / contrast / saturation jitter, and
    the strong view gets one randomly erased rectangle filled with noise.
    Every frame of the sequence is treated identically.

    Args:
        frames: ``(T, H, W, 3)`` numpy or ``(T, 3, H, W)`` tensor in [0, 1].

    Returns:
        ``(weak, strong, record)`` with tensors of shape ``(T, 3, H, W)``.
    """
    cfg = config or AugmentConfig()
    x = to_tensor(frames) if isinstance(frames, np.ndarray) else frames
    T, _, H, W = x.shape

    flipped = bool(rng.random() < cfg.flip_prob)
    M = np.eye(3)
    if flipped:
        M = np.array([[-1.0, 0, W], [0, 1, 0], [0, 0, 1]])
    if cfg.perspective > 0:
        src = np.array([[0, 0], [W, 0], [W, H], [0, H]], dtype=np.float64)
        dst = src + rng.uniform(-cfg.perspective, cfg.perspective, size=(4, 2)) * [W, H]
        M = homography(src, dst) @ M
    warped = x if np.array_equal(M, np.eye(3)) else warp_frames(x, M)

    wc = _draw_color(rng, cfg.weak_jitter)
    sc = _draw_color(rng, cfg.strong_jitter)
    weak = _color(warped, *wc)
    strong = _color(warped, *sc)

    box = None
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        box = _draw_erase(rng, H, W, cfg.erase_area)
        if box is not None:
            x1, y1, x2, y2 = box
            fill = torch.from_numpy(rng.random((3, y2 - y1, x2 - x1))).to(strong.dtype)
            strong = strong.clone()
            strong[:, :, y1:y2, x1:x2] = fill
    return weak, strong, AugRecord(M, flipped, wc, sc, box)
