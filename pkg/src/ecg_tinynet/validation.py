"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DataError, LeadCountMismatch, ShapeMismatch


def check_signals(X, n_leads: int | None = None, multiple_of: int | None = None,
                  dtype=np.float32) -> np.ndarray:
    """Coerce to a finite ``(N, C, T)`` array; 2-D input is read as ``(N, T)`` single-lead."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, ensure_all_finite=True,
                    input_name="X")
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3:
        raise ShapeMismatch(f"expected signals shaped (N, C, T) or (N, T), got {X.shape}")
    if len(X) == 0 or X.shape[2] == 0:
        raise DataError("empty signal batch")
    if n_leads is not None and X.shape[1] != n_leads:
        raise LeadCountMismatch(f"expected {n_leads} lead(s), got {X.shape[1]}")
    if multiple_of and X.shape[2] % multiple_of:
        raise ShapeMismatch(f"length {X.shape[2]} is not a multiple of {multiple_of}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeMismatch(f"labels must be 1-D, got shape {y.shape}")
    if len(y) != n_samples:
        raise ShapeMismatch(f"{n_samples} samples but {len(y)} labels")
    return y


def check_fs(fs) -> int:
    if int(fs) != fs or fs <= 0:
        raise DataError(f"sampling rate must be a positive integer, got {fs!r}")
    return int(fs)
