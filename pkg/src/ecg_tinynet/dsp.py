"""Signal conditioning: decimation, baseline removal, length and amplitude normalization.

Pipeline order: resample -> highpass -> fix_length -> lead selection -> normalize.
All functions take ``(leads, samples)`` or 1-D arrays and return new arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .exceptions import InvalidConfig, InvalidCutoff, NonIntegerRatio

STOPBAND_DB = 60.0
DESIGN_MARGIN_DB = 5.0  # kaiserord's estimate lands slightly short of the target
CUTOFF_FRACTION = 0.45  # anti-alias cutoff as a fraction of the output rate


@dataclass(frozen=True)
class PreprocessConfig:
    target_fs: int = 250
    target_len: int = 15000
    highpass_cutoff: float = 0.5
    highpass_order: int = 2
    lead_selection: tuple[int, ...] | None = None  # None keeps every lead; (0,) is Lead I
    normalize: str = "zscore"

    def validate(self, source_fs: int | None = None) -> "PreprocessConfig":
        if self.target_fs <= 0 or self.target_len <= 0:
            raise InvalidConfig("target_fs and target_len must be positive")
        if not 0 < self.highpass_cutoff < self.target_fs / 2:
            raise InvalidCutoff(f"highpass cutoff {self.highpass_cutoff} outside (0, {self.target_fs / 2})")
        if self.highpass_order < 1:
            raise InvalidConfig("highpass_order must be >= 1")
        if self.normalize not in ("none", "zscore"):
            raise InvalidConfig(f"normalize must be 'none' or 'zscore', got {self.normalize!r}")
        if source_fs is not None and source_fs % self.target_fs:
            raise NonIntegerRatio(f"source rate {source_fs} Hz is not a multiple of {self.target_fs} Hz")
        return self


@lru_cache(maxsize=16)
def decimation_taps(factor: int) -> np.ndarray:
    """Linear-phase Kaiser FIR for decimating by ``factor``.

    The -6 dB point sits at 0.45 x output rate and the stopband (>= 60 dB)
    begins at the output Nyquist frequency.
    """
    cutoff = 2 * CUTOFF_FRACTION / factor        # normalized to input Nyquist
    width = 2 * (1.0 / factor - cutoff)          # transition band, centred on cutoff
    numtaps, beta = sps.kaiserord(STOPBAND_DB + DESIGN_MARGIN_DB, width)
    numtaps |= 1                                  # odd length: integer group delay
    return sps.firwin(numtaps, cutoff, window=("kaiser", beta))


def resample(x: np.ndarray, from_fs: int, to_fs: int) -> np.ndarray:
    """Anti-alias filter then keep every k-th sample; output length ``ceil(n / k)``."""
    if to_fs <= 0 or from_fs <= 0 or from_fs % to_fs:
        raise NonIntegerRatio(f"cannot decimate {from_fs} Hz to {to_fs} Hz by an integer factor")
    k = from_fs // to_fs
    x = np.asarray(x)
    if k == 1:
        return x.copy()
    y = sps.resample_poly(x.astype(np.float64), 1, k, axis=-1, window=decimation_taps(k))
    return y.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def highpass(x: np.ndarray, fs: float, cutoff: float = 0.5, order: int = 2) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth high-pass."""
    if not 0 < cutoff < fs / 2:
        raise InvalidCutoff(f"cutoff {cutoff} Hz must lie in (0, {fs / 2}) for fs={fs}")
    sos = sps.butter(order, cutoff, btype="highpass", fs=fs, output="sos")
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 2:
        return np.zeros_like(x, dtype=np.float64).astype(x.dtype)
    padlen = min(3 * (2 * len(sos) + 1), n - 1)
    y = sps.sosfiltfilt(sos, x.astype(np.float64), axis=-1, padlen=padlen)
    return y.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def fix_length(x: np.ndarray, target_len: int) -> np.ndarray:
    """Truncate to the first ``target_len`` samples or zero-pad at the end."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n >= target_len:
        return x[..., :target_len].copy()
    pad = [(0, 0)] * (x.ndim - 1) + [(0, target_len - n)]
    return np.pad(x, pad)


def normalize(x: np.ndarray, valid_len: int | None = None, eps: float = 1e-8) -> np.ndarray:
    """Per-lead z-score over the first ``valid_len`` samples.

    Samples past ``valid_len`` (zero padding) are left at exactly zero.  Leads
    whose standard deviation is below ``eps`` are only centred.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    work = np.atleast_2d(x).astype(np.float64)
    n = work.shape[-1] if valid_len is None else min(int(valid_len), work.shape[-1])
    out = np.zeros_like(work)
    if n > 0:
        region = work[:, :n]
        mean = region.mean(axis=1, keepdims=True)
        std = region.std(axis=1, keepdims=True)
        scale = np.where(std < eps, 1.0, std)
        out[:, :n] = (region - mean) / scale
    out = out[0] if squeeze else out
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)


def select_leads(x: np.ndarray, leads: tuple[int, ...] | None) -> np.ndarray:
    if leads is None:
        return x
    x = np.atleast_2d(x)
    if max(leads) >= x.shape[0]:
        raise InvalidConfig(f"lead selection {leads} exceeds the {x.shape[0]} available leads")
    return x[list(leads)]


def preprocess(x: np.ndarray, fs: int, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full conditioning of one recording to ``(selected_leads, target_len)`` float32."""
    config.validate(fs)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x = resample(x, fs, config.target_fs)
    valid = min(x.shape[-1], config.target_len)
    x = highpass(x, config.target_fs, config.highpass_cutoff, config.highpass_order)
    x = fix_length(x, config.target_len)
    x = select_leads(x, config.lead_selection)
    if config.normalize == "zscore":
        x = normalize(x, valid)
    return x.astype(np.float32)
