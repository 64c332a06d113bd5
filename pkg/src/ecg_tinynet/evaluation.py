"""Evaluation reports, hold-out evaluation and k-fold cross-validation."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ecg_io import KFOLD, Manifest, make_splits
from .exceptions import EmptyDataset
from .metrics import argmax_predictions, auc_ovr, confusion, prf, roc_curve
from .model import ModelConfig, ModelParams, build, predict_proba, variant_name
from .train import TrainConfig, fit


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    auc: list[float | None]
    support: list[int]
    zero_division: list[bool]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float | None
    confusion: np.ndarray
    dataset_id: str = ""
    model_id: str = ""
    scores: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_scores(cls, scores: np.ndarray, labels, class_names=None, dataset_id: str = "",
                    model_id: str = "") -> "EvalReport":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) == 0:
            raise EmptyDataset("nothing to evaluate")
        k = scores.shape[1]
        names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(k))
        cm = confusion(labels, argmax_predictions(scores), k)
        per = [prf(cm, i) for i in range(k)]
        p, r, f, z = (list(col) for col in zip(*per))
        aucs, macro_auc = auc_ovr(scores, labels)
        return cls(names, p, r, f, aucs, cm.sum(axis=1).tolist(), z,
                   float(np.mean(p)), float(np.mean(r)), float(np.mean(f)), macro_auc, cm,
                   dataset_id, model_id, scores, labels)

    @property
    def num_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "num_samples": self.num_samples,
            "classes": [
                {"name": n, "precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i],
                 "auc": self.auc[i], "support": self.support[i], "zero_division": self.zero_division[i]}
                for i, n in enumerate(self.class_names)
            ],
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall,
                      "f1": self.macro_f1, "auc": self.macro_auc},
            "confusion": self.confusion.tolist(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "precision", "recall", "f1", "auc", "support", "zero_division"])
            for i, n in enumerate(self.class_names):
                auc = "" if self.auc[i] is None else f"{self.auc[i]:.6f}"
                w.writerow([n, f"{self.precision[i]:.6f}", f"{self.recall[i]:.6f}", f"{self.f1[i]:.6f}",
                            auc, self.support[i], int(self.zero_division[i])])
            macro_auc = "" if self.macro_auc is None else f"{self.macro_auc:.6f}"
            w.writerow(["macro", f"{self.macro_precision:.6f}", f"{self.macro_recall:.6f}",
                        f"{self.macro_f1:.6f}", macro_auc, self.num_samples, ""])

    def write_confusion_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for n, row in zip(self.class_names, self.confusion):
                w.writerow([n, *row.tolist()])

    def write_roc_csv(self, path) -> None:
        if self.scores is None:
            raise ValueError("report was built without scores")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "threshold", "fpr", "tpr"])
            for i, n in enumerate(self.class_names):
                if self.auc[i] is None:
                    continue
                fpr, tpr, thr = roc_curve(self.scores[:, i], self.labels == i)
                for t, a, b in zip(thr, fpr, tpr):
                    w.writerow([n, f"{t:.9g}", f"{a:.9g}", f"{b:.9g}"])

    def write_all(self, directory, stem: str = "eval") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.write_json(d / f"{stem}.json")
        self.write_csv(d / f"{stem}.csv")
        self.write_confusion_csv(d / f"{stem}_confusion.csv")
        self.write_roc_csv(d / f"{stem}_roc.csv")


def sharded_proba(params: ModelParams, dataset, n_jobs: int = 1, batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities, computed per fixed batch and merged in order.

    Batch boundaries do not depend on ``n_jobs``, so neither do the results.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("nothing to evaluate")
    starts = list(range(0, n, batch_size))

    def run(s):
        return predict_proba(params, dataset.take(np.arange(s, min(s + batch_size, n))), batch_size)

    if n_jobs <= 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts)


def evaluate(params: ModelParams, dataset, class_names=None, dataset_id: str = "", model_id: str = "",
             n_jobs: int = 1, batch_size: int = 64) -> EvalReport:
    probs = sharded_proba(params, dataset, n_jobs, batch_size)
    return EvalReport.from_scores(probs, dataset.labels, class_names, dataset_id,
                                  model_id or variant_name(params.config))


@dataclass
class CVResult:
    reports: list[EvalReport]
    fold_of: dict[str, int]
    best_epochs: list[int]

    @property
    def fold_f1(self) -> list[float]:
        return [r.macro_f1 for r in self.reports]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.fold_f1))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "macro_f1", "macro_auc", "support", "best_epoch"])
            for i, (r, e) in enumerate(zip(self.reports, self.best_epochs)):
                w.writerow([i, f"{r.macro_f1:.6f}", "" if r.macro_auc is None else f"{r.macro_auc:.6f}",
                            r.num_samples, e])
            w.writerow(["mean", f"{self.mean_f1:.6f}", "", "", ""])
            w.writerow(["std", f"{self.std_f1:.6f}", "", "", ""])


def _val_slice(ids, labels, class_names, seed: int, fraction: float = 0.1):
    """Stratified ``fraction`` of the given rows; returns a boolean mask."""
    sub = Manifest.from_labels(ids, labels, class_names)
    plan = make_splits(sub, seed, fractions=(fraction, 0.0))
    return np.array([plan.assignment[i] == "val" for i in ids])


def cross_validate(dataset, model_config: ModelConfig, train_config: TrainConfig = TrainConfig(),
                   folds: int = 10, seed: int = 0, class_names=None, n_jobs: int = 1,
                   run_dir=None) -> CVResult:
    """Stratified k-fold: train on k-1 folds (minus a 10% validation slice), test on the rest."""
    k = model_config.num_classes
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(k))
    ids = list(dataset.ids)
    labels = np.asarray(dataset.labels)
    plan = make_splits(Manifest.from_labels(ids, labels, names), seed, mode=KFOLD, folds=folds)
    fold_arr = np.array([plan.assignment[i] for i in ids])
    reports, best_epochs = [], []
    for f in range(folds):
        test_idx = np.flatnonzero(fold_arr == f)
        rest = np.flatnonzero(fold_arr != f)
        if len(test_idx) == 0:
            continue
        val_mask = _val_slice([ids[i] for i in rest], labels[rest], names, seed + 1000 + f)
        if not val_mask.any():
            val_mask[0] = True
        fold_dir = None if run_dir is None else Path(run_dir) / f"fold{f:02d}"
        params = build(model_config, seed + f)
        cfg = replace(train_config, seed=train_config.seed + f)
        best, runlog = fit(params, dataset.subset(rest[~val_mask]), dataset.subset(rest[val_mask]), cfg,
                           fold_dir)
        report = evaluate(best, dataset.subset(test_idx), names, f"fold{f}", n_jobs=n_jobs)
        if fold_dir is not None:
            report.write_all(fold_dir, "test")
        reports.append(report)
        best_epochs.append(runlog.best_epoch)
    return CVResult(reports, dict(zip(ids, fold_arr.tolist())), best_epochs)
