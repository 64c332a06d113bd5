"""Classification metrics: confusion matrix, per-class P/R/F1, one-vs-rest AUC."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .exceptions import IndexOutOfRange, LengthMismatch


def argmax_predictions(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"scores must be (N, K), got shape {scores.shape}")
    return scores.argmax(axis=1) if len(scores) else np.zeros(0, dtype=np.int64)


def confusion(true_labels, pred_labels, num_classes: int) -> np.ndarray:
    """``K x K`` counts with rows = true class and columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(pred_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IndexOutOfRange(f"label outside 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def prf(cm: np.ndarray, class_i: int) -> tuple[float, float, float, bool]:
    """Precision, recall and F1 for one class, plus a zero-division flag.

    Any undefined ratio (zero denominator) is reported as 0 and the flag is set.
    """
    cm = np.asarray(cm)
    tp = int(cm[class_i, class_i])
    fp = int(cm[:, class_i].sum()) - tp
    fn = int(cm[class_i, :].sum()) - tp
    flagged = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, flagged = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, flagged = 0.0, True
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, flagged = 0.0, True
    return precision, recall, f1, flagged


def binary_auc(scores, positive) -> float | None:
    """Mann-Whitney AUC with midranks; ``None`` when a class side is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(scores: np.ndarray, true_labels) -> tuple[list[float | None], float | None]:
    """One-vs-rest AUC per class and their unweighted mean over defined classes."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels)
    if len(scores) != len(y):
        raise LengthMismatch(f"{len(scores)} score rows vs {len(y)} labels")
    per_class = [binary_auc(scores[:, k], y == k) for k in range(scores.shape[1])]
    defined = [a for a in per_class if a is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points ``(fpr, tpr, thresholds)`` with one point per distinct score.

    Starts at (0, 0) with an infinite threshold; ties are grouped so the
    trapezoid area equals the midrank AUC.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], positive[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1] if s.size else np.zeros(0, int)
    tps = np.cumsum(pos)[last_of_group]
    fps = np.cumsum(~pos)[last_of_group]
    n_pos, n_neg = max(int(positive.sum()), 1), max(int((~positive).sum()), 1)
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return fpr, tpr, thresholds
