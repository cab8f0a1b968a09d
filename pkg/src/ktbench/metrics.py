"""Rank statistics used for model selection and reporting."""
from __future__ import annotations

import numpy as np


class MetricError(ValueError):
    pass


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    return (starts + (counts + 1) / 2.0)[inverse]


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (average ranks for ties)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be 0/1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined when only one class is present")
    u = average_ranks(s)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
