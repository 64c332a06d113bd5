"""Shared test oracles."""
from __future__ import annotations

import numpy as np

from ecg_tinynet.tensor import Tape, Tensor


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central differences of scalar ``fn(arrays)`` w.r.t. ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + h
        up = fn(arrays)
        base[i] = orig - h
        down = fn(arrays)
        base[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max absolute deviation scaled by the numeric gradient's largest entry."""
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradcheck(op, arrays, seed=0, h=1e-6, wrt=None):
    """Compare tape gradients of ``sum(op(*tensors) * R)`` against central differences.

    ``op`` receives Tensors and returns a Tensor; ``R`` is a fixed random
    projection so every output element contributes.  Returns the worst relative
    error over the inputs listed in ``wrt`` (default: all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[Tensor(a) for a in arrays]).data
    proj = np.random.default_rng(seed).normal(size=probe.shape)

    def scalar(arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
    tape.backward(out, proj)
    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i, h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(ana, num))
    return worst
