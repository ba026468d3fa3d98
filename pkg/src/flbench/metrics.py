"""Confusion counts, F-beta and the entropy-based fairness score."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsConfig:
    beta: float = 1.0
    threshold: float = 0.5

    def validate(self) -> None:
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


def confusion(probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions ``prob >= threshold`` against binary labels."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0:
        raise ValueError("confusion matrix of an empty prediction set")
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and labels {y.shape} differ in shape")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def f_beta(cm: ConfusionMatrix, beta: float) -> float:
    """(1 + b^2) P R / (b^2 P + R); zero whenever there is no true positive."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if cm.tp == 0:
        return 0.0
    precision = cm.tp / (cm.tp + cm.fp)
    recall = cm.tp / (cm.tp + cm.fn)
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def fairness_entropy(scores: Sequence[float]) -> float:
    """Base-2 entropy of the client scores normalised to a distribution.

    All-zero scores count as perfectly even, returning ``log2(K)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("fairness entropy needs at least one score")
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    total = s.sum()
    if total == 0:
        return math.log2(s.size)
    p = s / total
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log2(p))))
