"""Ranking and thresholded accuracy metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if s.size == 0:
        raise ValueError("no examples")
    return s, y


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from midranks; tied (positive, negative) pairs count one half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes among the labels")
    ranks = rankdata(s, method="average")
    # twice the U statistic is an integer, so this stays exact before the division
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1.0)
    return float(u2 / (2.0 * n_pos * n_neg))


def acc(scores, labels, threshold: float = 0.5) -> float:
    s, y = _as_arrays(scores, labels)
    return float(np.mean((s >= threshold) == y))
