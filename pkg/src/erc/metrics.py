"""Confusion matrix and support-weighted f1."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from erc.errors import DataError


def confusion_matrix(gold: Sequence[int], pred: Sequence[int], n_classes: int | None = None) -> np.ndarray:
    """``C x C`` counts with gold classes on rows and predictions on columns."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise DataError(f"gold and predictions must be equal-length vectors, got {gold.shape} and {pred.shape}")
    if gold.size == 0:
        raise DataError("cannot score an empty prediction list")
    if n_classes is None:
        n_classes = int(max(gold.max(), pred.max())) + 1
    if min(gold.min(), pred.min()) < 0 or max(gold.max(), pred.max()) >= n_classes:
        raise DataError(f"class indices must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def per_class_scores(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall, f1 and support per class; 0 wherever a denominator is 0."""
    tp = np.diag(cm).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    support = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, support.astype(np.int64)


def weighted_f1(pred: Sequence[int], gold: Sequence[int], n_classes: int | None = None) -> float:
    cm = confusion_matrix(gold, pred, n_classes)
    _, _, f1, support = per_class_scores(cm)
    return float((f1 * support).sum() / support.sum())
