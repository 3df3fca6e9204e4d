"""Evaluation metrics: accuracy, macro F1, Matthews correlation, Pearson correlation."""

from __future__ import annotations

import math
import warnings

import numpy as np


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(preds), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"preds and labels differ in shape: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one example")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float((p == y).mean())


def f1_macro(preds, labels, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    p, y = _pair(preds, labels)
    p, y = p.astype(np.int64), y.astype(np.int64)
    C = n_classes if n_classes is not None else int(max(p.max(), y.max())) + 1
    scores = []
    for c in range(C):
        tp = int(((p == c) & (y == c)).sum())
        fp = int(((p == c) & (y != c)).sum())
        fn = int(((p != c) & (y == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    p, y = _pair(preds, labels)
    p, y = p.astype(np.int64), y.astype(np.int64)
    C = n_classes if n_classes is not None else int(max(p.max(), y.max())) + 1
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def matthews(preds, labels, n_classes: int | None = None) -> float:
    """Matthews correlation, using the R_k generalisation for more than two classes.

    Returns 0 when the denominator vanishes (a constant predictor or label set).
    """
    cm = confusion_matrix(preds, labels, n_classes).astype(np.float64)
    n = cm.sum()
    correct = np.trace(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    cov_yp = correct * n - pred_tot @ true_tot
    cov_pp = n * n - pred_tot @ pred_tot
    cov_yy = n * n - true_tot @ true_tot
    denom = math.sqrt(cov_pp * cov_yy)
    if denom == 0:
        return 0.0
    return float(cov_yp / denom)


def pearson(preds, labels) -> float:
    """Pearson correlation; zero-variance input yields 0 with a RuntimeWarning."""
    p, y = _pair(preds, labels)
    if p.size < 2:
        raise ValueError("pearson needs at least two examples")
    p = p.astype(np.float64) - p.mean()
    y = y.astype(np.float64) - y.mean()
    denom = math.sqrt(float(p @ p) * float(y @ y))
    if denom == 0:
        warnings.warn("pearson: zero variance input, returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(p @ y / denom, -1.0, 1.0))


METRICS = {
    "accuracy": lambda p, y, C: accuracy(p, y),
    "f1_macro": lambda p, y, C: f1_macro(p, y, C),
    "matthews": lambda p, y, C: matthews(p, y, C),
    "pearson": lambda p, y, C: pearson(p, y),
}


def compute_metric(name: str, preds, labels, n_classes: int | None = None) -> float:
    try:
        fn = METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}") from None
    return fn(preds, labels, n_classes)
