"""scikit-learn compatible wrappers around preprocessing and the classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .datasets import ArrayDataset
from .ecg_io import Manifest, make_splits
from .model import ModelConfig, build, predict_proba, tiny_config, variant
from .train import TrainConfig, fit
from .validation import check_fs, check_labels, check_signals
from .weights import load_weights, save_weights


class EcgPreprocessor(TransformerMixin, BaseEstimator):
    """Resample, high-pass, fix length, select leads and z-score a batch of recordings.

    Stateless: ``fit`` only records the input lead count.
    """

    def __init__(self, fs=500, target_fs=250, target_len=15000, highpass_cutoff=0.5,
                 highpass_order=2, leads=None, normalize="zscore"):
        self.fs = fs
        self.target_fs = target_fs
        self.target_len = target_len
        self.highpass_cutoff = highpass_cutoff
        self.highpass_order = highpass_order
        self.leads = leads
        self.normalize = normalize

    def _config(self) -> dsp.PreprocessConfig:
        sel = None if self.leads is None else tuple(self.leads)
        cfg = dsp.PreprocessConfig(self.target_fs, self.target_len, self.highpass_cutoff,
                                   self.highpass_order, sel, self.normalize)
        return cfg.validate(check_fs(self.fs))

    def fit(self, X, y=None):
        X = check_signals(X, dtype=np.float64)
        self._config()
        self.n_leads_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_leads_in_")
        X = check_signals(X, self.n_leads_in_, dtype=np.float64)
        cfg = self._config()
        return np.stack([dsp.preprocess(x, self.fs, cfg) for x in X])


class ArrhythmiaClassifier(ClassifierMixin, BaseEstimator):
    """CNN + attention + BiLSTM classifier on preprocessed ``(N, C, T)`` signals.

    ``preset="tiny"`` keeps the topology at a desk-friendly width; ``"default"``
    is the full-size model.  A stratified ``validation_fraction`` of the
    training data drives checkpoint selection and early stopping.
    """

    def __init__(self, preset="tiny", variant="full", width=8, hidden=8, dropout=0.0, lr0=1e-2,
                 l2=0.0, batch_size=16, max_epochs=40, early_stop_patience=10, plateau=False,
                 class_weight="inverse_frequency", validation_fraction=0.1, random_state=0):
        self.preset = preset
        self.variant = variant
        self.width = width
        self.hidden = hidden
        self.dropout = dropout
        self.lr0 = lr0
        self.l2 = l2
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.plateau = plateau
        self.class_weight = class_weight
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, leads: int, k: int) -> ModelConfig:
        if self.preset == "tiny":
            base = tiny_config(leads, k, self.width, self.hidden, self.dropout)
        else:
            base = ModelConfig(input_leads=leads, num_classes=k)
        return variant(base, self.variant)

    def _train_config(self) -> TrainConfig:
        mode = "none" if self.class_weight in (None, "none") else "inverse_frequency"
        return TrainConfig(lr0=self.lr0, l2=self.l2, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           early_stop_patience=self.early_stop_patience, plateau_enabled=self.plateau,
                           class_weight_mode=mode, seed=self.random_state, prefetch=0).validate()

    def fit(self, X, y):
        X = check_signals(X)
        y = check_labels(y, len(X))
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        cfg = self._model_config(X.shape[1], len(self.classes_))
        if X.shape[2] % cfg.time_factor:
            raise ValueError(f"signal length must be a multiple of {cfg.time_factor}")
        ds = ArrayDataset(X, codes)
        val = np.zeros(len(ds), dtype=bool)
        if self.validation_fraction > 0:
            names = [str(c) for c in self.classes_]
            plan = make_splits(Manifest.from_labels(ds.ids, codes, names), self.random_state,
                               fractions=(self.validation_fraction, 0.0))
            val = np.array([plan.assignment[i] == "val" for i in ds.ids])
        train_ds = ds.subset(np.flatnonzero(~val)) if val.any() else ds
        val_ds = ds.subset(np.flatnonzero(val)) if val.any() else ds
        params = build(cfg, self.random_state)
        self.params_, self.runlog_ = fit(params, train_ds, val_ds, self._train_config())
        self.n_leads_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_signals(X, self.n_leads_in_, self.params_.config.time_factor)
        return predict_proba(self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def save(self, path) -> int:
        check_is_fitted(self, "params_")
        return save_weights(self.params_, path)

    @classmethod
    def from_weights(cls, path, classes=None, **params) -> "ArrhythmiaClassifier":
        """Wrap an ECGW archive (e.g. a CLI checkpoint) as a fitted estimator."""
        est = cls(**params)
        est.params_ = load_weights(path)
        k = est.params_.config.num_classes
        est.classes_ = np.arange(k) if classes is None else np.asarray(classes)
        est.n_leads_in_ = est.params_.config.input_leads
        est.runlog_ = None
        return est
