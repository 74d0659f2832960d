"""Contribution scores, normalized-entropy diversity and global/local unit masks.

Shapes follow the adapter unit axis ``U`` and client axis ``K``:

* per-sample unit score ``S_hat[u, k] = F_d[u] * W_d[u, k]``
* prediction-weighted score ``S[u, k, j] = S_hat[u, k] * P[j]``
* diversity ``D[u, k]``: entropy (base 2) of ``|S[u, k, :]| / sum |S[u, k, :]|``
  divided by ``log2 K``
* mask ``M[u, k] = D[u, k] > delta``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ValidationError

ZERO_MASS = 1e-12


@dataclass(frozen=True)
class ScoreTensor:
    layer_id: int
    scores: np.ndarray  # U x K x K
    n_samples: int

    def __post_init__(self):
        s = self.scores
        if s.ndim != 3 or s.shape[1] != s.shape[2]:
            raise ValidationError(f"score tensor must be U x K x K, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValidationError(f"non-finite scores in layer {self.layer_id}")
        s.setflags(write=False)

    def to_json(self) -> dict:
        return {"layer": self.layer_id, "n_samples": self.n_samples, "scores": self.scores.tolist()}


@dataclass(frozen=True)
class UnitMask:
    mask: np.ndarray  # U x K, int8 in {0, 1}
    delta: float

    @property
    def global_fraction(self) -> float:
        return float(self.mask.mean())


def sample_score(f_d: np.ndarray, w_d: np.ndarray) -> np.ndarray:
    """``S_hat = broadcast(F_d) * W_d``; accepts ``U`` or batched ``B x U`` features."""
    f_d = np.asarray(f_d, dtype=np.float64)
    w_d = np.asarray(w_d, dtype=np.float64)
    if w_d.ndim != 2 or f_d.shape[-1] != w_d.shape[0]:
        raise ValidationError(f"features {f_d.shape} do not match discriminator weights {w_d.shape}")
    return f_d[..., :, None] * w_d


def weight_by_prediction(s_hat: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Outer product over the trailing client axis: ``S[..., u, k, j] = S_hat[..., u, k] * P[..., j]``."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        return s_hat[..., None] * probs
    return s_hat[..., None] * probs[:, None, None, :]


class ScoreAccumulator:
    """Running sample-wise mean of prediction-weighted scores for one layer."""

    def __init__(self, layer_id: int):
        self.layer_id = layer_id
        self._sum: np.ndarray | None = None
        self.count = 0

    def add(self, s: np.ndarray) -> None:
        """Add one ``U x K x K`` tensor or a ``B x U x K x K`` batch."""
        s = np.asarray(s, dtype=np.float64)
        batch = s if s.ndim == 4 else s[None]
        total = batch.sum(axis=0)
        if self._sum is None:
            self._sum = total
        else:
            if total.shape != self._sum.shape:
                raise ValidationError(f"inconsistent score shape {total.shape} vs {self._sum.shape}")
            self._sum = self._sum + total
        self.count += batch.shape[0]

    def add_features(self, f_d: np.ndarray, w_d: np.ndarray, probs: np.ndarray) -> None:
        self.add(weight_by_prediction(sample_score(f_d, w_d), probs))

    def result(self) -> ScoreTensor:
        if self.count == 0:
            raise ValidationError("cannot accumulate scores from zero samples")
        return ScoreTensor(self.layer_id, self._sum / self.count, self.count)


def accumulate(per_sample: Iterable[np.ndarray], layer_id: int = 0) -> ScoreTensor:
    acc = ScoreAccumulator(layer_id)
    for s in per_sample:
        acc.add(s)
    return acc.result()


def average_scores(tensors: list[ScoreTensor]) -> ScoreTensor:
    """Elementwise mean of several clients' score tensors for the same layer."""
    if not tensors:
        raise ValidationError("no score tensors to average")
    stacked = np.stack([t.scores for t in tensors])
    return ScoreTensor(tensors[0].layer_id, stacked.mean(axis=0), sum(t.n_samples for t in tensors))


def diversity(scores) -> np.ndarray:
    """Normalized entropy over the predicted-client axis; returns ``U x K`` in [0, 1].

    Score vectors with total absolute mass below ``1e-12`` carry no client
    signal and get diversity 1.
    """
    s = scores.scores if isinstance(scores, ScoreTensor) else np.asarray(scores, dtype=np.float64)
    k = s.shape[-1]
    if k < 2:
        raise ValidationError("diversity needs at least two clients")
    mag = np.abs(s)
    mass = mag.sum(axis=-1)
    empty = mass < ZERO_MASS
    p = mag / np.where(empty, 1.0, mass)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log2(np.where(p > 0.0, p, 1.0)), 0.0)
    d = -terms.sum(axis=-1) / np.log2(k)
    d = np.clip(d, 0.0, 1.0)
    d[empty] = 1.0
    return d


def binarize(d: np.ndarray, delta: float) -> UnitMask:
    """Global (1) where diversity strictly exceeds ``delta``, local (0) otherwise."""
    if not 0.0 <= delta <= 1.0:
        raise ValidationError(f"delta must lie in [0, 1], got {delta}")
    return UnitMask((np.asarray(d) > delta).astype(np.int8), float(delta))
