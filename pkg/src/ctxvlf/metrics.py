"""Rank-based AUC."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata


def auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(pos == neg).

    Computed from mid-ranks of the pooled scores, which counts ties as one
    half exactly.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    # U statistic of the positives; rank sums are half-integers so this is exact
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))
