"""Indexable datasets consumed by training and evaluation.

Both kinds expose ``ids``, ``labels`` (primary class per sample), ``take(idx)``
returning a ``(n, C, T)`` float32 batch, and ``subset(idx)``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .ecg_io import read_cache
from .exceptions import DataError, EmptyDataset


class ArrayDataset:
    def __init__(self, X, y, ids: Sequence[str] | None = None):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            X = X[:, None, :]
        if X.ndim != 3:
            raise DataError(f"expected (N, C, T) samples, got {X.shape}")
        y = np.asarray(y, dtype=np.int64)
        if len(X) != len(y):
            raise DataError(f"{len(X)} samples vs {len(y)} labels")
        self.X = X
        self.labels = y
        self.ids = list(ids) if ids is not None else [f"s{i:05d}" for i in range(len(y))]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int]:
        return self.X.shape[1], self.X.shape[2]

    def take(self, idx) -> np.ndarray:
        return self.X[np.asarray(idx)]

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(self.X[idx], self.labels[idx], [self.ids[i] for i in idx])


class CacheDataset:
    """Lazily reads ``<cache_dir>/<id>.ecgs`` files, one per record."""

    def __init__(self, cache_dir, ids: Sequence[str], labels, leads: Sequence[int] | None = None):
        self.cache_dir = Path(cache_dir)
        self.ids = list(ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.leads = None if leads is None else list(leads)
        if not self.ids:
            raise EmptyDataset("dataset has no records")
        missing = [i for i in self.ids if not self.path(i).exists()]
        if missing:
            raise DataError(f"{len(missing)} cache files missing under {self.cache_dir}, e.g. {missing[0]}")

    def path(self, rec_id: str) -> Path:
        return self.cache_dir / f"{rec_id}.ecgs"

    def __len__(self) -> int:
        return len(self.ids)

    def _load(self, rec_id: str) -> np.ndarray:
        sig, _ = read_cache(self.path(rec_id))
        return sig[self.leads] if self.leads is not None else sig

    @property
    def sample_shape(self) -> tuple[int, int]:
        return self._load(self.ids[0]).shape

    def take(self, idx) -> np.ndarray:
        return np.stack([self._load(self.ids[i]) for i in np.asarray(idx).ravel()])

    def subset(self, idx) -> "CacheDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return CacheDataset(self.cache_dir, [self.ids[i] for i in idx], self.labels[idx], self.leads)
