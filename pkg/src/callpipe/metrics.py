"""Binary detection metrics: confusion-based scores and ROC/AUC."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    loss: float | None = None

    def to_dict(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _binary_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.size == 0:
        raise MetricError("labels must be a non-empty 1-D sequence")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    return y.astype(np.int64)


def roc_auc(labels: Sequence[int], scores: Sequence[float]) -> tuple[list[tuple[float, float]], float]:
    """ROC points (fpr, tpr) over descending unique scores and trapezoidal AUC.

    Equal scores share one threshold step, which gives ties half credit.
    """
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise MetricError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def youden_threshold(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Score threshold maximizing ``tpr - fpr`` on the ROC curve."""
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    best_t, best_j = 0.5, -np.inf
    for t in np.unique(s):
        pred = s >= t
        tpr = (pred & (y == 1)).sum() / max(1, (y == 1).sum())
        fpr = (pred & (y == 0)).sum() / max(1, (y == 0).sum())
        if tpr - fpr > best_j:
            best_t, best_j = float(t), tpr - fpr
    return best_t


def compute_metrics(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5,
                    loss: float | None = None) -> Metrics:
    y = _binary_labels(labels)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise MetricError("labels and scores differ in length")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    try:
        _, auc = roc_auc(y, s)
    except MetricError:
        auc = 0.5
    return Metrics((tp + tn) / y.size, precision, recall, f1_score(precision, recall), auc, loss)


def one_vs_rest(class_index: Sequence[int], probs: np.ndarray, class_names: Sequence[str],
                threshold: float = 0.5) -> dict[str, dict[str, float]]:
    """Per-class metrics treating each class in turn as the positive one."""
    idx = np.asarray(class_index)
    out = {}
    for c, name in enumerate(class_names):
        y = (idx == c).astype(int)
        if 0 < y.sum() < y.size:
            out[name] = compute_metrics(y, probs[:, c], threshold).to_dict()
    return out
