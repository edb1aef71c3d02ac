"""Rank and linear correlation between true and predicted quality scores."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError, ValidationError


def _pair(truths: Sequence[float], preds: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    if t.size != p.size:
        raise DimensionError(f"truths has {t.size} entries but preds has {p.size}")
    if t.size < 2:
        raise ValidationError(f"correlation needs at least 2 pairs, got {t.size}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
        raise ValidationError("scores must be finite")
    return t, p


def rank_average(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they occupy."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValidationError("rank_average needs at least one value")
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray, label: str) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0:
        raise UndefinedCorrelationError(f"{label}: truths are constant")
    if syy == 0.0:
        raise UndefinedCorrelationError(f"{label}: predictions are constant")
    r = float(np.dot(xc, yc)) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def plcc(truths: Sequence[float], preds: Sequence[float]) -> float:
    t, p = _pair(truths, preds)
    return _pearson(t, p, "plcc")


def srcc(truths: Sequence[float], preds: Sequence[float]) -> float:
    """Spearman correlation as the Pearson correlation of average ranks."""
    t, p = _pair(truths, preds)
    return _pearson(rank_average(t), rank_average(p), "srcc")


def srcc_closed_form(truths: Sequence[float], preds: Sequence[float]) -> float:
    """``1 - 6*sum(d^2) / (n(n^2-1))``; exact only when neither side has ties."""
    t, p = _pair(truths, preds)
    n = t.size
    d = rank_average(t) - rank_average(p)
    return 1.0 - 6.0 * float(np.dot(d, d)) / (n * (n * n - 1))
