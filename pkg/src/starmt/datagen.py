"""Procedural video sequences with boxes, classes and per-pixel depth.

Each sequence is a static smooth background with a handful of textured
shapes drifting across it.  The class of an object is encoded by its
silhouette (and, past six classes, by an interior texture), so a detector
has to look at shape rather than colour.

Everything here is a pure function of ``(GenConfig, seed)``.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
N_SHAPES = 6


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class GenConfig:
    T: int = 8
    H: int = 96
    W: int = 96
    n_classes: int = 4
    n_objects: tuple[int, int] = (2, 4)
    size_range: tuple[float, float] = (14.0, 30.0)
    max_speed: float = 2.5  # px / frame, per axis
    jitter: float = 0.75  # px, uniform per axis per frame
    stride: int = 8
    contrast_range: tuple[float, float] = (0.1, 0.3)
    texture_amplitude: float = 0.06
    visibility: float = 0.5

    def validate(self) -> None:
        if self.H % self.stride or self.W % self.stride:
            raise ValueError(
                f"frame size {self.H}x{self.W} not divisible by stride {self.stride}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad object count range {self.n_objects}")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for key in ("n_objects", "size_range", "contrast_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class BoxLabel:
    frame: int
    class_id: int
    box: tuple[float, float, float, float]
    track_id: int

    def to_json(self) -> dict:
        return {"frame": self.frame, "class_id": self.class_id,
                "box": [float(v) for v in self.box], "track_id": self.track_id}

    @classmethod
    def from_json(cls, d: dict) -> "BoxLabel":
        return cls(int(d["frame"]), int(d["class_id"]), tuple(float(v) for v in d["box"]),
                   int(d["track_id"]))


@dataclass
class ObjectTrack:
    """Motion-model parameters of one rendered object."""
    track_id: int
    class_id: int
    center0: np.ndarray  # (2,) x, y at t=0
    velocity: np.ndarray  # (2,) px / frame
    size: np.ndarray  # (2,) w, h
    depth: float
    color: np.ndarray
    offsets: np.ndarray  # (T, 2) per-frame jitter

    def centers(self) -> np.ndarray:
        t = np.arange(len(self.offsets))[:, None]
        return self.center0 + self.velocity * t + self.offsets


@dataclass
class VideoSequence:
    id: str
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    depth: np.ndarray | None  # (T, H, W) float32 in (0, 1]
    labels: list[BoxLabel] | None
    tracks: list[ObjectTrack] = field(default_factory=list, repr=False)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "VideoSequence":
        return VideoSequence(self.id, frames, self.depth, self.labels, self.tracks)

    def labels_for_frame(self, t: int) -> list[BoxLabel]:
        return [lab for lab in (self.labels or []) if lab.frame == t]


# ----------------------------------------------------------------------------
# rendering


def _shape_mask(class_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    shape = class_id % N_SHAPES
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape == 0:  # square
        m = inside
    elif shape == 1:  # triangle, apex up
        m = inside & (np.abs(u) <= (v + 1) / 2)
    elif shape == 2:  # plus
        m = inside & ((np.abs(u) <= 0.35) | (np.abs(v) <= 0.35))
    elif shape == 3:  # ring
        r2 = u ** 2 + v ** 2
        m = (r2 <= 1) & (r2 >= 0.3)
    elif shape == 4:  # disc
        m = u ** 2 + v ** 2 <= 1
    else:  # diamond
        m = np.abs(u) + np.abs(v) <= 1
    return m


def _texture(class_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    kind = (class_id // N_SHAPES) % 3
    if kind == 0:
        return np.cos(3 * np.pi * (u + v)) * 0.5
    if kind == 1:
        return np.sign(np.sin(4 * np.pi * v))
    return np.sign(np.sin(3 * np.pi * u) * np.sin(3 * np.pi * v))


def _smooth_field(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    lo, hi = f.min(), f.max()
    return (f - lo) / max(hi - lo, 1e-12)


def _background(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    H, W = cfg.H, cfg.W
    img = np.stack([_smooth_field(rng, (H, W), 10.0) for _ in range(3)], axis=-1)
    tint = rng.uniform(-0.08, 0.08, size=3)
    img = 0.4 + 0.2 * img + tint
    yy = np.linspace(0.0, 1.0, H)[:, None]
    dfield = 0.6 * _smooth_field(rng, (H, W), 16.0) + 0.4 * (1 - yy)
    dfield = (dfield - dfield.min()) / max(np.ptp(dfield), 1e-12)
    depth = 0.86 + 0.14 * dfield
    return np.clip(img, 0.0, 1.0), depth


def _sample_tracks(cfg: GenConfig, rng: np.random.Generator, bg_mean: np.ndarray) -> list[ObjectTrack]:
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    tracks = []
    for i in range(n):
        class_id = int(rng.integers(cfg.n_classes))
        size = rng.uniform(*cfg.size_range, size=2)
        center0 = np.array([rng.uniform(size[0] / 2, cfg.W - size[0] / 2),
                            rng.uniform(size[1] / 2, cfg.H - size[1] / 2)])
        velocity = rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)
        depth = float(rng.uniform(0.2, 0.8))
        # every channel sits a contrast step above or below the mean background
        sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
        color = np.clip(bg_mean + sign * rng.uniform(*cfg.contrast_range, size=3), 0.0, 1.0)
        offsets = rng.uniform(-cfg.jitter, cfg.jitter, size=(cfg.T, 2))
        tracks.append(ObjectTrack(i, class_id, center0, velocity, size, depth, color, offsets))
    return tracks


def _visible_box(cfg: GenConfig, cx: float, cy: float, w: float, h: float):
    x1, y1, x2, y2 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
    cx2, cy2 = min(x2, float(cfg.W)), min(y2, float(cfg.H))
    if cx2 <= cx1 or cy2 <= cy1:
        return None
    frac = (cx2 - cx1) * (cy2 - cy1) / (w * h)
    if frac < cfg.visibility:
        return None
    return (cx1, cy1, cx2, cy2)


def _quantize(x: np.ndarray) -> np.ndarray:
    # frames live on the 8-bit grid so PNG round trips are exact
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render_background(gen_config: GenConfig, seed: int) -> np.ndarray:
    """Background-only frames for ``seed`` (same rng stream as :func:`generate_sequence`)."""
    gen_config.validate()
    rng = np.random.default_rng(seed)
    bg, _ = _background(gen_config, rng)
    return np.repeat(_quantize(bg)[None], gen_config.T, axis=0)


def generate_sequence(gen_config: GenConfig, seed: int, seq_id: str | None = None) -> VideoSequence:
    """Render one synthetic sequence.

    Objects move as ``center0 + velocity * t + offset_t`` with ``offset_t``
    uniform in ``[-jitter, jitter]``.  They are painted far to near, so a
    nearer object occludes a farther one.  A label is emitted for every
    frame in which at least ``visibility`` of the object's box lies inside
    the frame; the label box is clipped to the frame.
    """
    cfg = gen_config
    cfg.validate()
    rng = np.random.default_rng(seed)
    bg, bg_depth = _background(cfg, rng)
    tracks = _sample_tracks(cfg, rng, bg.reshape(-1, 3).mean(axis=0))

    T, H, W = cfg.T, cfg.H, cfg.W
    frames = np.repeat(bg[None], T, axis=0)
    depth = np.repeat(bg_depth[None], T, axis=0)
    px = np.arange(W) + 0.5
    py = np.arange(H) + 0.5
    labels: list[BoxLabel] = []
    order = sorted(tracks, key=lambda tr: -tr.depth)
    for t in range(T):
        for tr in order:
            cx, cy = tr.centers()[t]
            w, h = tr.size
            u = (px[None, :] - cx) / (w / 2)
            v = (py[:, None] - cy) / (h / 2)
            mask = _shape_mask(tr.class_id, u, v)
            if not mask.any():
                continue
            tex = _texture(tr.class_id, u, v)[..., None]
            shade = np.where(tr.color > 0.5, -1.0, 1.0) * cfg.texture_amplitude
            pix = tr.color + shade * (0.5 + 0.5 * tex)
            frames[t][mask] = np.broadcast_to(pix, (H, W, 3))[mask]
            depth[t][mask] = tr.depth
        for tr in tracks:
            cx, cy = tr.centers()[t]
            box = _visible_box(cfg, cx, cy, *tr.size)
            if box is not None:
                labels.append(BoxLabel(t, tr.class_id, box, tr.track_id))
    labels.sort(key=lambda lab: (lab.frame, lab.track_id))
    return VideoSequence(
        id=seq_id or f"seq_{seed}",
        frames=_quantize(frames),
        depth=depth.astype(np.float32),
        labels=labels,
        tracks=tracks,
    )


# ----------------------------------------------------------------------------
# on-disk datasets


def sequence_seed(master_seed: int, index: int) -> int:
    """Seed of sequence ``index``: first word of ``SeedSequence([master_seed, index])``."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    raw = ratios * n
    sizes = np.floor(raw + 1e-9).astype(int)
    rem = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes.tolist()


@dataclass
class DatasetManifest:
    root: str
    splits: dict[str, list[str]]
    seed: int
    n_classes: int
    gen_config: dict = field(default_factory=dict)
    sequence_seeds: dict[str, int] = field(default_factory=dict)
    source: str | None = None
    degradation: str | None = None

    def ids(self, split: str) -> list[str]:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}")
        return list(self.splits[split])

    def seq_dir(self, split: str, seq_id: str) -> Path:
        return Path(self.root) / split / seq_id

    def all_sequences(self) -> Iterator[tuple[str, str]]:
        for split in SPLITS:
            for sid in self.splits.get(split, []):
                yield split, sid

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, root: str | os.PathLike) -> "DatasetManifest":
        path = Path(root) / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        d = json.loads(path.read_text())
        m = cls(root=str(Path(root)), **d)
        ids = [sid for _, sid in m.all_sequences()]
        if len(ids) != len(set(ids)):
            raise DatasetError(f"duplicate sequence ids in {path}")
        return m


def write_sequence(seq: VideoSequence, seq_dir: Path) -> None:
    fdir = seq_dir / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(fdir / f"{t:04d}.png")
    if seq.depth is not None:
        np.save(seq_dir / "depth.npy", seq.depth.astype("<f4"))
    if seq.labels is not None:
        (seq_dir / "labels.json").write_text(
            json.dumps([lab.to_json() for lab in seq.labels], indent=1))


def read_frames(seq_dir: Path) -> np.ndarray:
    files = sorted((seq_dir / "frames").glob("*.png"))
    if not files:
        raise DatasetError(f"no frames under {seq_dir}")
    frames = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
    return np.stack(frames)


def read_labels(seq_dir: Path) -> list[BoxLabel]:
    with open(seq_dir / "labels.json") as fh:
        return [BoxLabel.from_json(d) for d in json.load(fh)]


def load_sequence(manifest: DatasetManifest, split: str, seq_id: str,
                  with_labels: bool = True) -> VideoSequence:
    sdir = manifest.seq_dir(split, seq_id)
    frames = read_frames(sdir)
    dpath = sdir / "depth.npy"
    depth = np.load(dpath).astype(np.float32) if dpath.exists() else None
    labels = read_labels(sdir) if with_labels else None
    return VideoSequence(seq_id, frames, depth, labels)


class VideoDataset:
    """Cached view of one split.

    With ``with_labels=False`` the label files are never opened and every
    returned sequence carries ``labels=None``.
    """

    def __init__(self, manifest: DatasetManifest, split: str, with_labels: bool = True,
                 max_frames: int | None = None):
        self.manifest = manifest
        self.split = split
        self.with_labels = with_labels
        self.max_frames = max_frames
        self.ids = manifest.ids(split)
        self._cache: dict[str, VideoSequence] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> VideoSequence:
        sid = self.ids[i]
        if sid not in self._cache:
            seq = load_sequence(self.manifest, self.split, sid, with_labels=self.with_labels)
            if self.max_frames is not None and seq.T > self.max_frames:
                n = self.max_frames
                labels = None if seq.labels is None else [lab for lab in seq.labels if lab.frame < n]
                seq = VideoSequence(seq.id, seq.frames[:n], None if seq.depth is None else seq.depth[:n], labels)
            self._cache[sid] = seq
        return self._cache[sid]

    def __iter__(self) -> Iterator[VideoSequence]:
        for i in range(len(self)):
            yield self[i]

    @property
    def name(self) -> str:
        return f"{Path(self.manifest.root).name}/{self.split}"


def build_dataset(gen_config: GenConfig, n_sequences: int, split_ratios: Sequence[float],
                  seed: int, root: str | os.PathLike, force: bool = False) -> DatasetManifest:
    """Generate ``n_sequences`` sequences and write them under ``root``.

    Sequence ``i`` is rendered with ``sequence_seed(seed, i)``; the first
    ``n_train`` indices go to train, the next ``n_val`` to val, the rest to
    test.
    """
    gen_config.validate()
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        if not force:
            raise FileExistsError(f"{root / MANIFEST_NAME} exists; pass force=True to overwrite")
        shutil.rmtree(root)
    sizes = split_sizes(n_sequences, split_ratios)
    splits: dict[str, list[str]] = {}
    seeds: dict[str, int] = {}
    idx = 0
    for split, size in zip(SPLITS, sizes):
        splits[split] = []
        for _ in range(size):
            sid = f"seq_{idx:04d}"
            s = sequence_seed(seed, idx)
            seq = generate_sequence(gen_config, s, seq_id=sid)
            write_sequence(seq, root / split / sid)
            splits[split].append(sid)
            seeds[sid] = s
            idx += 1
    manifest = DatasetManifest(root=str(root), splits=splits, seed=seed,
                               n_classes=gen_config.n_classes, gen_config=asdict(gen_config),
                               sequence_seeds=seeds)
    manifest.save()
    log.info("wrote %d sequences to %s (%s)", n_sequences, root, sizes)
    return manifest
