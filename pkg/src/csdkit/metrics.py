"""Threshold-free detection metrics for uncertainty scores.

Higher score means "more likely out-of-distribution" throughout.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError


def _scores(a, name):
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeError(f"{name} scores are empty")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} scores contain non-finite values")
    return a


def auroc(scores_id, scores_ood) -> float:
    """P(OOD score > ID score) with ties counted one half (Mann-Whitney U).

    Uses midranks of the pooled scores, so the cost is one sort.
    """
    s_id = _scores(scores_id, "ID")
    s_ood = _scores(scores_ood, "OOD")
    ranks = rankdata(np.concatenate([s_id, s_ood]), method="average")
    n, m = s_id.size, s_ood.size
    u = float(np.sum(ranks[n:])) - m * (m + 1) / 2.0
    return u / (n * m)


def aupr(scores_id, scores_ood, positive="out") -> float:
    """Average precision with the given positive class.

    Precision is evaluated at every distinct score threshold and weighted by
    the recall gained there (step-wise interpolation; tied scores enter
    together).  For ``positive="in"`` the scores are negated, since low
    uncertainty then signals the positive class.
    """
    s_id = _scores(scores_id, "ID")
    s_ood = _scores(scores_ood, "OOD")
    if positive == "out":
        pos, neg = s_ood, s_id
    elif positive == "in":
        pos, neg = -s_id, -s_ood
    else:
        raise ValueError(f"positive must be 'in' or 'out', got {positive!r}")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # last index of each block of tied scores
    ends = np.flatnonzero(np.r_[np.diff(scores) != 0, True])
    tp = np.cumsum(labels)[ends]
    predicted = ends + 1.0
    precision = tp / predicted
    recall = tp / pos.size
    gain = np.diff(np.r_[0.0, recall])
    return float(np.sum(gain * precision))


def detection_report(scores_id, scores_ood):
    return {
        "auroc": auroc(scores_id, scores_ood),
        "aupr_in": aupr(scores_id, scores_ood, "in"),
        "aupr_out": aupr(scores_id, scores_ood, "out"),
    }
