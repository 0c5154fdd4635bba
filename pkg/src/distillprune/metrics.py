"""Evaluation metrics: accuracy for classification, MAE/MSE for regression."""

from __future__ import annotations

import numpy as np


def _paired(y, y_hat):
    a = np.asarray(y, dtype=np.float64).ravel()
    b = np.asarray(y_hat, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("metrics need at least one element")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def accuracy(predictions, labels) -> float:
    """Fraction of correct predictions, in [0, 1]."""
    p = np.asarray(predictions).ravel()
    t = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("accuracy needs at least one prediction")
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    return float(np.mean(p == t))


def mae(y, y_hat) -> float:
    """Mean absolute difference between targets and predictions."""
    a, b = _paired(y, y_hat)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("mae requires finite inputs")
    return float(np.mean(np.abs(a - b)))


def mse(y, y_hat) -> float:
    """Mean squared difference between targets and predictions."""
    a, b = _paired(y, y_hat)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("mse requires finite inputs")
    return float(np.mean((a - b) ** 2))
