"""Data-driven decision threshold: moving average of per-batch F1-optimal thresholds."""
from __future__ import annotations

from collections import deque

import numpy as np

MAX_SWEEP_PIXELS = 200_000


def f1_sweep(scores, labels):
    """F1 of `scores > t` for every candidate threshold t.

    Candidates are 0, 1 and the midpoints between adjacent distinct scores,
    which between them realise every distinct prediction set. Returns
    (thresholds ascending, f1 values).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise ValueError("need at least one score")
    uniq, inverse = np.unique(s, return_inverse=True)
    pos = np.bincount(inverse, weights=y, minlength=len(uniq))
    cnt = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    # counts of scores >= uniq[i], padded so index len(uniq) means "none"
    tp_ge = np.append(np.cumsum(pos[::-1])[::-1], 0.0)
    pp_ge = np.append(np.cumsum(cnt[::-1])[::-1], 0.0)
    thresholds = np.sort(np.concatenate([[0.0], (uniq[:-1] + uniq[1:]) / 2.0, [1.0]]))
    first_above = np.searchsorted(uniq, thresholds, side="right")
    tp = tp_ge[first_above]
    denom = pp_ge[first_above] + pos.sum()
    f1 = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return thresholds, f1


def _subsample(scores, labels, limit, rng):
    s = np.asarray(scores).ravel()
    y = np.asarray(labels).ravel()
    if s.size <= limit:
        return s, y
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y.astype(bool))
    k_pos = int(round(limit * len(pos) / s.size))
    keep = np.concatenate([rng.choice(pos, k_pos, replace=False),
                           rng.choice(neg, limit - k_pos, replace=False)])
    return s[keep], y[keep]


def batch_optimal_threshold(scores, labels, max_pixels: int = MAX_SWEEP_PIXELS, rng=None):
    """Threshold maximising foreground F1, or None if no label is positive.

    Ties go to the larger threshold. Large batches are subsampled (stratified
    by label) to at most `max_pixels` before the sweep.
    """
    s = np.asarray(scores).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if not y.any():
        return None
    if s.size > max_pixels:
        s, y = _subsample(s, y, max_pixels, rng or np.random.default_rng(0))
    thresholds, f1 = f1_sweep(s, y)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(thresholds[best])


class ThresholdTracker:
    """Ring buffer of recent per-batch thresholds; `current` is their mean."""

    def __init__(self, window: int = 500, default: float = 0.5, values=()):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = int(window)
        self.default = float(default)
        self.values = deque((float(v) for v in values), maxlen=self.window)

    @property
    def current(self) -> float:
        if not self.values:
            return self.default
        return float(np.mean(self.values))

    def update(self, batch_threshold) -> "ThresholdTracker":
        if batch_threshold is None:
            return self
        t = float(batch_threshold)
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"threshold {t} outside [0, 1]")
        self.values.append(t)
        return self

    def reset(self):
        self.values.clear()

    def snapshot(self) -> tuple[float, int]:
        return self.current, len(self.values)

    def to_json(self) -> dict:
        return {"window": self.window, "values": list(self.values), "default": self.default}

    @classmethod
    def from_json(cls, d: dict) -> "ThresholdTracker":
        return cls(d["window"], d["default"], d["values"])

    def __repr__(self):
        return f"ThresholdTracker(current={self.current:.4f}, n={len(self.values)}, window={self.window})"


def update(tracker: ThresholdTracker, batch_threshold) -> ThresholdTracker:
    return tracker.update(batch_threshold)


def apply_threshold(scores, tracker):
    """Binary prediction `scores > threshold` (strict); `tracker` may be a float."""
    t = tracker.current if isinstance(tracker, ThresholdTracker) else float(tracker)
    return np.asarray(scores) > t
