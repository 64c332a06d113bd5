import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from ecg_tinynet.estimator import ArrhythmiaClassifier, EcgPreprocessor
from ecg_tinynet.exceptions import LeadCountMismatch, NonIntegerRatio, ShapeMismatch
from ecg_tinynet.synth import synth_ecg
from ecg_tinynet.validation import check_labels, check_signals


def raw_batch(classes=(6, 2), per_class=12, fs=500, seconds=2.048, leads=1):
    X = [synth_ecg(c, fs, seconds, seed=i, n_leads=leads).signal for c in classes for i in range(per_class)]
    y = np.repeat(np.array(["SNR", "LBBB"])[: len(classes)], per_class)
    return np.stack(X), y


def test_preprocessor_params_and_transform():
    pre = EcgPreprocessor(fs=500, target_len=512)
    assert pre.get_params()["target_len"] == 512
    assert clone(pre).get_params() == pre.get_params()
    X, _ = raw_batch(per_class=2)
    out = pre.fit_transform(X)
    assert out.shape == (4, 1, 512) and out.dtype == np.float32
    assert np.allclose(out.mean(axis=2), 0, atol=1e-5)


def test_preprocessor_checks():
    with pytest.raises(NonIntegerRatio):
        EcgPreprocessor(fs=360).fit(np.zeros((1, 1, 100)))
    pre = EcgPreprocessor(fs=500, target_len=64).fit(np.zeros((1, 2, 100)))
    with pytest.raises(LeadCountMismatch):
        pre.transform(np.zeros((1, 3, 100)))
    with pytest.raises(ValueError):
        pre.transform(np.full((1, 2, 100), np.nan))


def test_pipeline_fit_predict_score(tmp_path):
    X, y = raw_batch()
    pipe = make_pipeline(EcgPreprocessor(fs=500, target_len=512),
                         ArrhythmiaClassifier(max_epochs=25, random_state=0))
    pipe.fit(X, y)
    assert set(pipe.predict(X)) <= {"SNR", "LBBB"}
    assert pipe.score(X, y) >= 0.9
    proba = pipe.predict_proba(X)
    np.testing.assert_allclose(proba.sum(1), 1, atol=1e-6)
    clf = pipe[-1]
    clf.save(tmp_path / "m.ecgw")
    again = ArrhythmiaClassifier.from_weights(tmp_path / "m.ecgw", clf.classes_)
    Z = pipe[0].transform(X)
    assert np.array_equal(again.predict_proba(Z), clf.predict_proba(Z))


def test_classifier_get_params_and_clone():
    clf = ArrhythmiaClassifier(width=4, variant="cnn")
    c2 = clone(clf)
    assert c2.get_params()["variant"] == "cnn" and not hasattr(c2, "params_")


def test_validation_helpers():
    assert check_signals(np.zeros((2, 16))).shape == (2, 1, 16)
    with pytest.raises(ShapeMismatch):
        check_signals(np.zeros((2, 1, 15)), multiple_of=8)
    with pytest.raises(ShapeMismatch):
        check_labels([0, 1], 3)
