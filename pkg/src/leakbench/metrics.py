"""Empirical privacy and the analysis statistics used by the experiment runner."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from leakbench.errors import EmptyInput, InvalidInput, ShapeError


def empirical_privacy_demographic(accuracies: Iterable[float]) -> float:
    """One minus the mean attack accuracy over demographic attributes."""
    acc = np.asarray(list(accuracies), dtype=np.float64)
    if acc.size == 0:
        raise EmptyInput("no accuracies given")
    if np.any(acc < 0) or np.any(acc > 1):
        raise InvalidInput("accuracies must lie in [0, 1]")
    return float(1.0 - acc.mean())


def _binary_matrix(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x)).astype(bool)


def _check_aligned(pred, gold):
    p, g = _binary_matrix(pred), _binary_matrix(gold)
    if p.shape != g.shape:
        raise ShapeError(f"predictions {p.shape} and gold {g.shape} are misaligned")
    return p, g


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    # no positives anywhere: treat as a perfect match
    return 1.0 if denom == 0 else 2 * tp / denom


def micro_f1(pred, gold) -> float:
    """Micro F1 pooled over every (document, entity) cell.

    ``pred`` and ``gold`` are ``(n_docs, n_entities)`` presence indicators.
    """
    p, g = _check_aligned(pred, gold)
    tp = np.sum(p & g)
    fp = np.sum(p & ~g)
    fn = np.sum(~p & g)
    return _f1(tp, fp, fn)


def macro_f1(pred, gold) -> float:
    p, g = _check_aligned(pred, gold)
    scores = [
        _f1(np.sum(p[:, j] & g[:, j]), np.sum(p[:, j] & ~g[:, j]), np.sum(~p[:, j] & g[:, j]))
        for j in range(p.shape[1])
    ]
    return float(np.mean(scores))


def empirical_privacy_entities(pred, gold) -> float:
    return float(1.0 - micro_f1(pred, gold))


def sharpness_stats(posteriors: Sequence) -> dict:
    """Mean and lower-middle median of the per-vector maximum probability."""
    if len(posteriors) == 0:
        raise EmptyInput("no posteriors given")
    maxes = np.sort(np.max(np.asarray(posteriors, dtype=np.float64), axis=1))
    return {"mean_max": float(maxes.mean()), "median_max": float(maxes[(len(maxes) - 1) // 2])}


def rank_correlation(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns 0.0 when either side is constant, where no ordering exists.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInput("xs and ys must be 1-d and of equal length")
    if len(x) < 3:
        raise InvalidInput("rank correlation needs at least 3 points")
    rx, ry = rankdata(x) - (len(x) + 1) / 2, rankdata(y) - (len(y) + 1) / 2
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))
