"""Dice / mDice and training-stability statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import sigmoid

PROB_THRESHOLD = 0.5


@dataclass
class DiceReport:
    per_class: list[float]
    mdice: float
    threshold: float = PROB_THRESHOLD


@dataclass
class StabilityReport:
    series: list[float]
    window: int
    rolling_std: list[float]
    smoothed: list[float]
    rounds_to_threshold: int | None
    fraction: float

    @property
    def mean_rolling_std(self) -> float:
        return float(np.mean(self.rolling_std))


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a = np.asarray(pred_mask)
    b = np.asarray(gt_mask)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a, b = a.astype(bool), b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def mdice(per_class) -> float:
    vals = [float(v) for v in per_class]
    if not vals:
        raise ValidationError("mdice needs at least one class")
    return float(np.mean(vals))


def dice_report(logits: np.ndarray, gt: np.ndarray, threshold: float = PROB_THRESHOLD) -> DiceReport:
    """Per-class Dice pooled over every pixel of a ``N x H x W x C`` evaluation set."""
    pred = sigmoid(logits) >= threshold
    c = gt.shape[-1]
    per = [dice(pred[..., i], gt[..., i]) for i in range(c)]
    return DiceReport(per, mdice(per), threshold)


def rolling_std(series, window: int) -> np.ndarray:
    """Population standard deviation over each length-``window`` sliding window."""
    x = np.asarray(series, dtype=np.float64)
    if window < 2 or len(x) < window:
        raise ValidationError(f"need series length >= window >= 2 (len={len(x)}, window={window})")
    wins = np.lib.stride_tricks.sliding_window_view(x, window)
    # shifting by the window's first value is exact for constant windows
    return (wins - wins[:, :1]).std(axis=1)


def centered_moving_average(series, window: int) -> np.ndarray:
    """Moving average centred on each point; the window shrinks at the ends."""
    x = np.asarray(series, dtype=np.float64)
    half_lo, half_hi = (window - 1) // 2, window // 2
    out = np.empty_like(x)
    for t in range(len(x)):
        out[t] = x[max(0, t - half_lo) : t + half_hi + 1].mean()
    return out


def stability(series, window: int = 5, fraction: float = 0.9) -> StabilityReport:
    x = np.asarray(series, dtype=np.float64)
    rs = rolling_std(x, window)
    sm = centered_moving_average(x, window)
    target = fraction * sm[-1]
    hits = np.flatnonzero(sm >= target)
    first = int(hits[0]) if hits.size else None
    return StabilityReport(x.tolist(), window, rs.tolist(), sm.tolist(), first, fraction)
