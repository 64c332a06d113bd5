"""Synthetic ECG-like recordings for desk-scale tests.

This is a test fixture, not a physiological model: each beat is a sum of
Gaussian bumps (P, Q, R, S, T) and each class perturbs rhythm or morphology in
a way a small network can pick up.  Class ids follow the default label order
(AF, IAVB, LBBB, PAC, PVC, RBBB, SNR, STD, STE); larger ids wrap around.
"""
from __future__ import annotations

import numpy as np

from .ecg_io import EcgRecord
from .tensor import Rng

CLASS_ORDER = ("AF", "IAVB", "LBBB", "PAC", "PVC", "RBBB", "SNR", "STD", "STE")

# (centre s relative to R, amplitude mV, width s)
_NORMAL = {
    "P": (-0.20, 0.15, 0.025),
    "Q": (-0.025, -0.10, 0.010),
    "R": (0.0, 1.00, 0.012),
    "S": (0.025, -0.25, 0.010),
    "T": (0.30, 0.30, 0.050),
}


def _morphology(kind: str, ectopic: bool) -> list[tuple[float, float, float]]:
    waves = dict(_NORMAL)
    if kind == "AF":
        del waves["P"]
    elif kind == "IAVB":
        waves["P"] = (-0.34, 0.15, 0.025)
    elif kind == "LBBB":
        waves["R"] = (0.01, 0.90, 0.035)
        waves["S"] = (0.06, -0.10, 0.015)
        waves["T"] = (0.32, -0.25, 0.060)
    elif kind == "RBBB":
        waves["S"] = (0.035, -0.30, 0.018)
        waves["R2"] = (0.070, 0.55, 0.015)
    elif kind == "STD":
        waves["ST"] = (0.14, -0.18, 0.045)
    elif kind == "STE":
        waves["ST"] = (0.14, 0.20, 0.045)
    if ectopic and kind == "PAC":
        waves["P"] = (-0.14, -0.12, 0.020)
    if ectopic and kind == "PVC":
        waves = {"R": (0.0, 1.4, 0.040), "S": (0.09, -0.4, 0.030), "T": (0.34, -0.45, 0.070)}
    return list(waves.values())


def _beat_times(kind: str, duration_s: float, rng: np.random.Generator) -> list[tuple[float, bool]]:
    rate = rng.uniform(85, 125) if kind == "AF" else rng.uniform(60, 95)
    rr = 60.0 / rate
    t = rng.uniform(0.1, rr)
    beats = []
    k = 0
    while t < duration_s + 0.5:
        ectopic = kind in ("PAC", "PVC") and k % 4 == 3
        beats.append((t, ectopic))
        if kind == "AF":
            step = rr * rng.uniform(0.55, 1.45)
        else:
            step = rr * (1 + rng.normal(0, 0.02))
        if kind in ("PAC", "PVC") and (k + 1) % 4 == 3:
            step = rr * 0.6
        elif ectopic:
            step = rr * 1.4  # compensatory pause
        t += step
        k += 1
    return beats


def synth_ecg(class_id: int, fs: int = 250, duration_s: float = 10.0, seed: int = 0,
              n_leads: int = 1, noise: float = 0.03) -> EcgRecord:
    """Deterministic synthetic recording of ``round(fs * duration_s)`` samples."""
    kind = CLASS_ORDER[class_id % len(CLASS_ORDER)]
    rng = Rng(seed).stream("synth", class_id)
    n = int(round(fs * duration_s))
    t = np.arange(n) / fs
    clean = np.zeros(n)
    half = int(0.6 * fs)
    for tb, ectopic in _beat_times(kind, duration_s, rng):
        centre = int(round(tb * fs))
        lo, hi = max(centre - half, 0), min(centre + half, n)
        if lo >= hi:
            continue
        seg = t[lo:hi] - tb
        for mu, amp, width in _morphology(kind, ectopic):
            clean[lo:hi] += amp * np.exp(-0.5 * ((seg - mu) / width) ** 2)
    if kind == "AF":
        clean += 0.04 * np.sin(2 * np.pi * rng.uniform(5, 7) * t + rng.uniform(0, 2 * np.pi))
    wander = 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))

    gains = np.r_[1.0, rng.uniform(0.5, 1.3, n_leads - 1) * rng.choice([-1, 1], n_leads - 1)]
    signal = gains[:, None] * (clean + wander)[None, :] + rng.normal(0, noise, (n_leads, n))
    return EcgRecord(f"SYN{class_id}_{seed}", signal.astype(np.float32), fs, (int(class_id),), fs)


def synth_dataset(class_ids, per_class: int, fs: int = 250, duration_s: float = 2.048,
                  n_leads: int = 1, seed: int = 0, noise: float = 0.03, zscore: bool = True):
    """Stack ``per_class`` records per class into ``(X, y)``; labels are positions in ``class_ids``."""
    from .dsp import normalize

    X, y = [], []
    for label, cid in enumerate(class_ids):
        for i in range(per_class):
            rec = synth_ecg(cid, fs, duration_s, seed * 100_003 + label * 10_007 + i, n_leads, noise)
            X.append(normalize(rec.signal) if zscore else rec.signal)
            y.append(label)
    return np.stack(X), np.array(y, dtype=np.int64)
