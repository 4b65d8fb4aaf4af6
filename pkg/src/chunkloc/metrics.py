"""Classification metrics and the mean (std) reporting format."""

from __future__ import annotations

import math


def accuracy(y_true: list, y_pred: list) -> float:
    if len(y_true) != len(y_pred):
        raise ValueError("length mismatch")
    if not y_true:
        return 0.0
    return sum(a == b for a, b in zip(y_true, y_pred)) / len(y_true)


def macro_f1(y_true: list, y_pred: list, labels: list | None = None) -> float:
    """Unweighted mean of per-class F1; classes absent from both sides score 0."""
    if len(y_true) != len(y_pred):
        raise ValueError("length mismatch")
    if labels is None:
        labels = sorted(set(y_true) | set(y_pred))
    scores = []
    for label in labels:
        tp = sum(t == label and p == label for t, p in zip(y_true, y_pred))
        fp = sum(t != label and p == label for t, p in zip(y_true, y_pred))
        fn = sum(t == label and p != label for t, p in zip(y_true, y_pred))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores) if scores else 0.0


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    n = len(values)
    if n == 0:
        raise ValueError("no values")
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def fmt_mean_std(values: list[float]) -> str:
    """Render run statistics the way results tables quote them, e.g. "0.977 (0.0095)"."""
    mean, std = mean_std(values)
    return f"{mean:.3f} ({std:.4f})"
