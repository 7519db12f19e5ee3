from __future__ import annotations

import math

import numpy as np

TRS = "TRS"
SRS = "SRS"


def stage_of(iteration: int, tau: int, first: str = TRS) -> str:
    """Stage active at ``iteration``: the first stage on even ``tau``-blocks, the other on odd ones."""
    if iteration < 0 or tau < 1:
        raise ValueError("need iteration >= 0 and tau >= 1")
    if first not in (TRS, SRS):
        raise ValueError(f"unknown stage {first!r}")
    other = SRS if first == TRS else TRS
    return first if (iteration // tau) % 2 == 0 else other


def mask_frames(T: int, r_percent: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of the frames left after dropping ``floor(r * T / 100)`` at random.

    At least one frame always survives.
    """
    if not 0 <= r_percent <= 75:
        raise ValueError("masking rate must lie in [0, 75]")
    n_drop = min(math.floor(r_percent * T / 100 + 1e-9), T - 1)
    if n_drop == 0:
        return np.arange(T)
    dropped = rng.choice(T, size=n_drop, replace=False)
    return np.setdiff1d(np.arange(T), dropped)


def cosine_lr(it: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * it / (total - 1)))
