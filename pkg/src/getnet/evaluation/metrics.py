"""Rare-event metrics: AP, precision, recall, F1, and their aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..errors import DataError, DegenerateMetricError

METRICS = ("ap", "recall", "precision", "f1")


@dataclass(frozen=True)
class MetricSet:
    ap: float
    recall: float
    precision: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be 1-D sequences of equal length")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be binary")
    return s, y.astype(np.int64)


def average_precision(scores, labels, ties: str = "group", seed: int = 0) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    ``ties="group"`` treats equal scores as one threshold (every member of a
    tie group gets the group's precision), so a constant scorer has AP equal
    to the prevalence.  ``ties="permute"`` breaks ties by a seeded random
    permutation followed by a stable sort.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateMetricError("AP is undefined without positives")
    if ties == "permute":
        perm = np.random.default_rng(seed).permutation(s.size)
        order = perm[np.argsort(-s[perm], kind="stable")]
        hits = np.cumsum(y[order])
        ranks = np.arange(1, s.size + 1)
        return float(np.sum((hits / ranks)[y[order] == 1]) / n_pos)
    if ties != "group":
        raise ValueError(f"unknown tie rule {ties!r}")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    precision = tp / (ends + 1)
    new_pos = np.diff(np.r_[0, tp])
    return float(np.sum(new_pos * precision) / n_pos)


def compute_metrics(scores, labels, threshold: float = 0.5, ties: str = "group",
                    seed: int = 0) -> MetricSet:
    """AP plus precision/recall/F1 of ``score >= threshold``.

    Precision with no predicted positives is 0 by convention.
    """
    s, y = _validate(scores, labels)
    if y.sum() == 0:
        raise DegenerateMetricError("recall and AP are undefined without positives")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    n_pred = int(pred.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / int(y.sum())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricSet(average_precision(s, y, ties, seed), recall, precision, f1)


def population_std(values: Sequence[float]) -> float:
    """sqrt(mean((x - mean)^2)), dividing by n."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise DataError("std of an empty sequence")
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def aggregate(values: Sequence[float], weights: Sequence[float]) -> tuple[float, float, float]:
    """(micro, macro, sigma): count-weighted mean, plain mean, population std."""
    m = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if m.size == 0 or m.shape != w.shape:
        raise DataError("need equal-length, non-empty metric and weight sequences")
    if np.any(w <= 0):
        raise DataError("aggregation weights must be positive")
    micro = float(np.sum(m * w) / np.sum(w))
    macro = float(np.sum(m) / m.size)
    return micro, macro, population_std(m)
