"""AUC, RelaImpr and log-loss."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from csdm.numcore import BCE_EPS


class MetricUndefinedError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    rank_sum = float(np.sum(ranks[pos], dtype=np.float64))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def rela_impr(model_auc: float, baseline_auc: float) -> float:
    """Relative AUC improvement over random guessing, in percent."""
    if baseline_auc == 0.5:
        raise MetricUndefinedError("RelaImpr is undefined for a baseline AUC of exactly 0.5")
    return ((model_auc - 0.5) / (baseline_auc - 0.5) - 1.0) * 100.0


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), BCE_EPS, 1 - BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1 - y) * np.log(1 - p)))
