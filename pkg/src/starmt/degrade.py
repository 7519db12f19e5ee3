"""Synthetic target domains: additive noise, air turbulence and haze.

All operations return a new :class:`~starmt.datagen.VideoSequence` with the
same shape, labels and depth as the input, intensities clipped to [0, 1].
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .datagen import (MANIFEST_NAME, DatasetManifest, VideoSequence, load_sequence,
                      write_sequence)

log = logging.getLogger(__name__)

KINDS = ("noise", "turbulence", "haze")

NOISE_SIGMA_RANGE = (10 / 255, 50 / 255)
HAZE_BETA_RANGE = (0.5, 1.5)
TURBULENCE_STRENGTH_RANGE = (1.0, 3.0)
TURBULENCE_CORR_RANGE = (0.7, 0.95)


@dataclass
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        p = self.params
        if p.get("sigma", 0) < 0 or p.get("beta", 0) < 0 or p.get("strength", 0) < 0:
            raise ValueError(f"negative severity in {p}")
        if not 0 <= p.get("temporal_corr", 0) < 1:
            raise ValueError("temporal_corr must lie in [0, 1)")

    def apply(self, seq: VideoSequence) -> VideoSequence:
        p = self.params
        if self.kind == "noise":
            return add_gaussian_noise(seq, p["sigma"], self.seed)
        if self.kind == "haze":
            return apply_haze(seq, p["beta"], p.get("A", 1.0))
        return apply_turbulence(seq, p["strength"], p["temporal_corr"], self.seed,
                                spatial_sigma=p.get("spatial_sigma", 4.0))


def add_gaussian_noise(seq: VideoSequence, sigma: float, seed: int) -> VideoSequence:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return seq.with_frames(seq.frames.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=seq.frames.shape)
    out = np.clip(seq.frames + noise, 0.0, 1.0).astype(np.float32)
    return seq.with_frames(out)


def apply_haze(seq: VideoSequence, beta: float, A: float = 1.0) -> VideoSequence:
    """Atmospheric scattering: ``I * t + A * (1 - t)`` with ``t = exp(-beta * depth)``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if seq.depth is None:
        raise ValueError(f"sequence {seq.id} carries no depth; haze needs it")
    trans = np.exp(-beta * seq.depth.astype(np.float64))[..., None]
    out = seq.frames * trans + A * (1.0 - trans)
    return seq.with_frames(np.clip(out, 0.0, 1.0).astype(np.float32))


def _unit_smoothed_noise(rng: np.random.Generator, shape: tuple[int, ...], sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to unit variance per pixel."""
    white = rng.standard_normal(shape)
    axes = (0,) * (len(shape) - 2) + (sigma, sigma)
    smooth = ndimage.gaussian_filter(white, axes, mode="wrap")
    # variance of filtered white noise = sum of squared kernel weights
    delta = np.zeros(shape[-2:])
    delta[0, 0] = 1.0
    k = ndimage.gaussian_filter(delta, sigma, mode="wrap")
    return smooth / np.sqrt((k ** 2).sum())


def turbulence_fields(T: int, H: int, W: int, strength: float, temporal_corr: float,
                      seed: int, spatial_sigma: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Displacement and blur fields of the turbulence model.

    Three unit-variance smoothed-noise channels evolve as an AR(1) process
    ``z_t = rho * z_{t-1} + sqrt(1 - rho^2) * e_t``.  Channels 0-1 scaled by
    ``strength`` give the (dx, dy) displacement in pixels; channel 2 is
    pushed through the normal CDF and scaled to ``[0, strength / 2]`` to
    give the per-pixel blur sigma.

    Returns:
        ``(disp, blur)`` of shapes ``(T, 2, H, W)`` and ``(T, H, W)``.
    """
    rng = np.random.default_rng(seed)
    rho = temporal_corr
    z = np.empty((T, 3, H, W))
    z[0] = _unit_smoothed_noise(rng, (3, H, W), spatial_sigma)
    innov = np.sqrt(1.0 - rho ** 2)
    for t in range(1, T):
        z[t] = rho * z[t - 1] + innov * _unit_smoothed_noise(rng, (3, H, W), spatial_sigma)
    disp = strength * z[:, :2]
    blur = (strength / 2.0) * ndtr(z[:, 2])
    return disp, blur


def _warp(frame: np.ndarray, disp: np.ndarray) -> np.ndarray:
    H, W, _ = frame.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    coords = [yy + disp[1], xx + disp[0]]
    return np.stack([ndimage.map_coordinates(frame[..., c], coords, order=1, mode="nearest")
                     for c in range(frame.shape[-1])], axis=-1)


def _varying_blur(frame: np.ndarray, sigma_map: np.ndarray, n_levels: int = 5) -> np.ndarray:
    smax = float(sigma_map.max())
    if smax <= 0:
        return frame
    levels = np.linspace(0.0, smax, n_levels)
    stack = [frame] + [ndimage.gaussian_filter(frame, (s, s, 0), mode="nearest") for s in levels[1:]]
    stack = np.stack(stack)
    pos = sigma_map / (levels[1] - levels[0])
    lo = np.clip(np.floor(pos).astype(int), 0, n_levels - 2)
    frac = (pos - lo)[..., None]
    yy, xx = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    return stack[lo, yy, xx] * (1 - frac) + stack[lo + 1, yy, xx] * frac


def apply_turbulence(seq: VideoSequence, strength: float, temporal_corr: float, seed: int,
                     spatial_sigma: float = 4.0) -> VideoSequence:
    """Turbulence-lite: smooth random warp followed by spatially varying blur."""
    if strength < 0:
        raise ValueError("strength must be >= 0")
    if not 0 <= temporal_corr < 1:
        raise ValueError("temporal_corr must lie in [0, 1)")
    if strength == 0:
        return seq.with_frames(seq.frames.copy())
    T, H, W, _ = seq.frames.shape
    disp, blur = turbulence_fields(T, H, W, strength, temporal_corr, seed, spatial_sigma)
    out = np.empty_like(seq.frames)
    for t in range(T):
        warped = _warp(seq.frames[t].astype(np.float64), disp[t])
        out[t] = np.clip(_varying_blur(warped, blur[t]), 0.0, 1.0)
    return seq.with_frames(out)


def sample_degradation_spec(kind: str, rng: np.random.Generator,
                            turbulence_range: tuple[float, float] = TURBULENCE_STRENGTH_RANGE
                            ) -> DegradationSpec:
    if kind == "noise":
        params = {"sigma": float(rng.uniform(*NOISE_SIGMA_RANGE))}
    elif kind == "haze":
        params = {"beta": float(rng.uniform(*HAZE_BETA_RANGE)), "A": 1.0}
    elif kind == "turbulence":
        params = {"strength": float(rng.uniform(*turbulence_range)),
                  "temporal_corr": float(rng.uniform(*TURBULENCE_CORR_RANGE))}
    else:
        raise ValueError(f"unknown degradation kind {kind!r}")
    return DegradationSpec(kind, params, int(rng.integers(2 ** 31 - 1)))


def degrade_dataset(manifest: DatasetManifest, kind: str, seed: int,
                    out_root: str | os.PathLike, force: bool = False) -> DatasetManifest:
    """Write a degraded copy of every sequence in ``manifest`` under ``out_root``.

    Sequence ``i`` (in manifest order) draws its spec from
    ``default_rng(SeedSequence([seed, i]))``.  Label and depth files are
    copied byte for byte; the drawn spec goes to ``degradation.json``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}")
    out_root = Path(out_root)
    if (out_root / MANIFEST_NAME).exists():
        if not force:
            raise FileExistsError(f"{out_root} exists; pass force=True to overwrite")
        shutil.rmtree(out_root)
    for i, (split, sid) in enumerate(manifest.all_sequences()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spec = sample_degradation_spec(kind, rng)
        src = manifest.seq_dir(split, sid)
        dst = out_root / split / sid
        seq = load_sequence(manifest, split, sid, with_labels=False)
        if kind == "haze" and seq.depth is None:
            raise ValueError(f"{src} has no depth.npy; haze needs depth")
        out = spec.apply(seq)
        write_sequence(VideoSequence(sid, out.frames, None, None), dst)
        for name in ("labels.json", "depth.npy"):
            if (src / name).exists():
                shutil.copyfile(src / name, dst / name)
        (dst / "degradation.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True))
    new = DatasetManifest(root=str(out_root), splits={k: list(v) for k, v in manifest.splits.items()},
                          seed=seed, n_classes=manifest.n_classes, gen_config=dict(manifest.gen_config),
                          sequence_seeds=dict(manifest.sequence_seeds), source=manifest.root,
                          degradation=kind)
    new.save()
    log.info("degraded %s -> %s (%s)", manifest.root, out_root, kind)
    return new


def load_degradation(manifest: DatasetManifest, split: str, seq_id: str) -> DegradationSpec:
    d = json.loads((manifest.seq_dir(split, seq_id) / "degradation.json").read_text())
    return DegradationSpec(**d)


__all__ = ["DegradationSpec", "add_gaussian_noise", "apply_haze", "apply_turbulence",
           "turbulence_fields", "sample_degradation_spec", "degrade_dataset", "load_degradation"]
