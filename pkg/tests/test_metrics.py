import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_tinynet.exceptions import LengthMismatch
from ecg_tinynet.metrics import argmax_predictions, auc_ovr, binary_auc, confusion, prf, roc_curve


def brute_confusion(t, p, k):
    cm = [[0] * k for _ in range(k)]
    for a, b in zip(t, p):
        cm[a][b] += 1
    return np.array(cm)


def brute_prf(t, p, cls):
    tp = sum(1 for a, b in zip(t, p) if a == cls and b == cls)
    fp = sum(1 for a, b in zip(t, p) if a != cls and b == cls)
    fn = sum(1 for a, b in zip(t, p) if a == cls and b != cls)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def trapezoid_auc(scores, positive):
    """Explicit ROC by threshold sweep over distinct scores, integrated with trapezoids."""
    pos = np.asarray(positive, bool)
    fpr, tpr = [0.0], [0.0]
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tpr.append(np.sum(pred & pos) / pos.sum())
        fpr.append(np.sum(pred & ~pos) / (~pos).sum())
    area = 0.0
    for i in range(1, len(fpr)):
        area += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2
    return area


def test_confusion_cases():
    assert np.array_equal(confusion([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    assert np.array_equal(confusion([], [], 4), np.zeros((4, 4), int))
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0], 2)


def test_confusion_matches_brute_force():
    rng = np.random.default_rng(0)
    t, p = rng.integers(0, 9, 1000), rng.integers(0, 9, 1000)
    cm = confusion(t, p, 9)
    assert np.array_equal(cm, brute_confusion(t, p, 9))
    assert np.array_equal(cm.sum(axis=1), np.bincount(t, minlength=9))


def test_prf_examples():
    # TP=2, FP=1, FN=1
    cm = np.array([[2, 1], [1, 0]])
    p, r, f, flag = prf(cm, 0)
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
    assert not flag
    for k in range(3):
        assert prf(np.diag([3, 4, 5]), k)[:3] == (1.0, 1.0, 1.0)
    # TP=0, FP=0, FN=5
    assert prf(np.array([[0, 5], [0, 7]]), 0) == (0.0, 0.0, 0.0, True)


def test_prf_matches_brute_force_on_random_label_sets():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 10))
        n = int(rng.integers(1, 300))
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        cm = confusion(t, p, k)
        for cls in range(k):
            assert prf(cm, cls)[:3] == brute_prf(t, p, cls)


def test_argmax_ties_lowest_index():
    assert argmax_predictions(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


def test_auc_trivial_cases():
    assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert binary_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert binary_auc([0.1, 0.2], [1, 1]) is None


def test_auc_matches_trapezoidal_roc():
    rng = np.random.default_rng(2)
    for i in range(100):
        n = int(rng.integers(2, 1001))
        # coarse rounding on half the sets to exercise ties
        scores = rng.random(n).round(2 if i % 2 else 12)
        positive = rng.random(n) < rng.uniform(0.1, 0.9)
        if positive.all() or not positive.any():
            positive[0] = not positive[0]
        assert abs(binary_auc(scores, positive) - trapezoid_auc(scores, positive)) < 1e-9


def test_roc_points_integrate_to_auc():
    rng = np.random.default_rng(3)
    scores = rng.random(200).round(1)
    positive = rng.random(200) < 0.3
    fpr, tpr, thr = roc_curve(scores, positive)
    assert fpr[0] == tpr[0] == 0 and fpr[-1] == tpr[-1] == 1
    assert np.isinf(thr[0])
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert area == pytest.approx(binary_auc(scores, positive), abs=1e-12)


def test_auc_ovr_macro_excludes_undefined():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    per, macro = auc_ovr(scores, [0, 1, 0])
    assert per[2] is None
    assert macro == pytest.approx(np.mean([per[0], per[1]]))


def test_auc_against_sklearn():
    from sklearn.metrics import roc_auc_score

    rng = np.random.default_rng(4)
    scores = rng.random((300, 4))
    y = rng.integers(0, 4, 300)
    per, _ = auc_ovr(scores, y)
    for k in range(4):
        assert per[k] == pytest.approx(roc_auc_score(y == k, scores[:, k]), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-400, 400), min_size=4, max_size=60),
       st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_transform(values, seed):
    scores = np.array(values) / 8.0  # grid keeps the transforms strictly monotone in floating point
    positive = np.random.default_rng(seed).random(scores.size) < 0.5
    if positive.all() or not positive.any():
        positive[0] = not positive[0]
    base = binary_auc(scores, positive)
    assert binary_auc(np.tanh(scores / 40) * 3 + 1, positive) == pytest.approx(base, abs=1e-12)
    assert binary_auc(scores ** 3, positive) == pytest.approx(base, abs=1e-12)
