"""Evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError


def _pair(preds, golds, min_len=1):
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(golds, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ContractError(f"length mismatch: {p.size} predictions vs {g.size} golds")
    if p.size < min_len:
        raise ContractError(f"need at least {min_len} items, got {p.size}")
    return p, g


def accuracy(preds, golds):
    p, g = _pair(preds, golds)
    return float(np.mean(p == g))


def f1_binary(preds, golds, positive=1):
    p, g = _pair(preds, golds)
    tp = np.sum((p == positive) & (g == positive))
    fp = np.sum((p == positive) & (g != positive))
    fn = np.sum((p != positive) & (g == positive))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def pearson(preds, golds):
    p, g = _pair(preds, golds, min_len=2)
    pc, gc = p - p.mean(), g - g.mean()
    denom = np.sqrt(np.sum(pc * pc) * np.sum(gc * gc))
    if denom == 0.0:
        raise UndefinedMetricError("correlation of a zero-variance input")
    return float(np.clip(np.sum(pc * gc) / denom, -1.0, 1.0))


def spearman(preds, golds):
    """Pearson correlation of average ranks (ties share their mean rank)."""
    p, g = _pair(preds, golds, min_len=2)
    return pearson(rankdata(p), rankdata(g))


METRICS = {"accuracy": accuracy, "f1": f1_binary, "pearson": pearson, "spearman": spearman}


def compute(names, preds, golds):
    return {name: METRICS[name](preds, golds) for name in names}
