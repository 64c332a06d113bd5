"""Inference latency and memory benchmark."""
from __future__ import annotations

import json
import os
import platform
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import psutil

from .model import ModelParams, predict_proba


@dataclass
class BenchReport:
    runs: int
    samples_per_run: int
    total_s: float
    mean_s: float
    median_s: float
    p95_s: float
    rss_before_bytes: int
    rss_after_bytes: int
    model_file_bytes: int | None
    host: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def host_description() -> str:
    return f"{platform.system()} {platform.machine()} {platform.processor() or ''} cpus={os.cpu_count()}".strip()


def benchmark(params: ModelParams, x: np.ndarray, runs: int = 100, model_path=None) -> BenchReport:
    """Time ``runs`` eval-mode passes over ``x`` after one untimed warm-up.

    Latencies are per sample: each run's wall time divided by the batch size.
    ``total_s`` sums those latencies, so ``mean_s == total_s / runs``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim == 2:
        x = x[None]
    proc = psutil.Process()
    rss_before = proc.memory_info().rss
    predict_proba(params, x)  # warm-up, excluded
    per_sample = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        predict_proba(params, x)
        per_sample[i] = (time.perf_counter() - t0) / len(x)
    rss_after = proc.memory_info().rss
    total = float(per_sample.sum())
    size = Path(model_path).stat().st_size if model_path is not None else None
    return BenchReport(runs, len(x), total, total / runs, float(np.median(per_sample)),
                       float(np.percentile(per_sample, 95)), rss_before, rss_after, size, host_description())
