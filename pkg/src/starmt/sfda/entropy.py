"""Mean self-entropy of teacher class scores and entropy-based checkpoint selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

MAX_ENTROPY = 1 / math.e


def mean_self_entropy(scores) -> float:
    """``-mean(s * ln s)`` over an ``(N, n_c)`` array of sigmoid scores, with ``0 ln 0 = 0``.

    Each term peaks at ``s = 1/e``, so the result lies in ``[0, 1/e]``.
    """
    s = torch.as_tensor(scores, dtype=torch.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("mean self-entropy needs at least one proposal")
    s = s.clamp(0.0, 1.0)
    return float(-torch.special.xlogy(s, s).mean())


@dataclass
class EntropyTrace:
    window: int = 100
    iterations: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def append(self, iteration: int, value: float) -> None:
        if self.iterations and iteration <= self.iterations[-1]:
            raise ValueError("trace iterations must be strictly increasing")
        self.iterations.append(int(iteration))
        self.values.append(float(value))

    def __len__(self) -> int:
        return len(self.values)

    def smoothed(self) -> np.ndarray:
        """Trailing mean over the last ``window`` entries (fewer at the start)."""
        v = np.asarray(self.values, dtype=np.float64)
        # direct window sums rather than a running cumsum, so flat stretches stay exactly flat
        padded = np.concatenate([np.zeros(self.window - 1), v])
        sums = np.lib.stride_tricks.sliding_window_view(padded, self.window).sum(axis=1)
        counts = np.minimum(np.arange(1, len(v) + 1), self.window)
        return sums / counts

    def to_json(self) -> dict:
        return {"window": self.window, "iterations": self.iterations, "values": self.values}


def first_local_minimum(curve: np.ndarray, width: int) -> int | None:
    """Index of the first point strictly below the ``width`` points before it and not above the ``width`` after.

    Only points with full neighbourhoods on both sides qualify.
    """
    n = len(curve)
    for i in range(width, n - width):
        if curve[i] < curve[i - width:i].min() and curve[i] <= curve[i + 1:i + width + 1].min():
            return int(i)
    return None


def select_checkpoint(trace: EntropyTrace, snapshot_every: int | None = None, rule: str = "first_local_min") -> int:
    """Iteration whose teacher should be kept.

    The trace is smoothed with a trailing window of ``trace.window``.  Under
    ``rule="first_local_min"`` the first local minimum of the smoothed curve
    is returned, falling back to the global minimum; ``rule="global_min"``
    returns the global minimum directly.  With ``snapshot_every`` the answer
    is restricted to multiples of it: a local minimum found on the full
    curve is moved to the nearest such iteration.  A trace shorter than
    the window is not smoothed and its raw global minimum is returned.
    """
    if len(trace) == 0:
        raise ValueError("empty entropy trace")
    if rule not in ("first_local_min", "global_min"):
        raise ValueError(f"unknown selection rule {rule!r}")
    its = np.asarray(trace.iterations)
    if snapshot_every:
        cand = np.flatnonzero(its % snapshot_every == 0)
        if cand.size == 0:
            raise ValueError("no trace entry falls on a snapshot iteration")
    else:
        cand = np.arange(len(its))
    if len(trace) < trace.window:
        raw = np.asarray(trace.values)
        return int(its[cand[np.argmin(raw[cand])]])
    curve = trace.smoothed()
    if rule == "first_local_min":
        i = first_local_minimum(curve, trace.window)
        if i is not None:
            # the closest stored teacher; the earlier one on ties
            return int(its[cand[np.argmin(np.abs(its[cand] - its[i]))]])
        log.info("no interior local minimum of H; using the global minimum")
    return int(its[cand[np.argmin(curve[cand])]])
