"""Differentiable operators used by the network.

Layouts are channel-first with a leading batch axis: sequences are
``(N, C, T)``, dense activations ``(N, F)``.  Weights follow an
``(out, in, *kernel)`` convention throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import IndexOutOfRange, ShapeMismatch, UninitializedState
from .tensor import Tensor, as_tensor, result

PROB_CLIP = 1e-7


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. a ``(N, 1, T)`` gate)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return result(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp never sees a positive argument
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return result(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return result(t, (x,), lambda g: (g * (1 - t * t),))


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = _softmax(x.data, axis)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return result(p, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum_all(x: Tensor) -> Tensor:
    return result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------------------
# convolution and pooling

def conv_out_len(length: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return ``(T_out, pad_left, pad_right)``; same-padding splits the pad TF-style."""
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    if padding == "same":
        t_out = math.ceil(length / stride)
        total = max((t_out - 1) * stride + kernel - length, 0)
        return t_out, total // 2, total - total // 2
    if padding == "valid":
        if length < kernel:
            raise ShapeMismatch(f"valid conv needs length >= kernel ({length} < {kernel})")
        return (length - kernel) // stride + 1, 0, 0
    raise ShapeMismatch(f"unknown padding {padding!r}")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of ``x (N, C_in, T)`` with ``w (C_out, C_in, k)``.

    Computed as ``k`` shifted matrix products instead of im2col, so memory stays
    at the size of the padded input even for 15000-sample records.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-D x and w, got {x.shape} and {w.shape}")
    n, c_in, length = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
    if b is not None and b.shape != (c_out,):
        raise ShapeMismatch(f"conv1d bias shape {b.shape} != ({c_out},)")
    t_out, left, right = conv_out_len(length, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    span = stride * (t_out - 1) + 1

    out = np.zeros((n, c_out, t_out), dtype=np.result_type(x.dtype, w.dtype))
    for j in range(k):
        out += np.matmul(w.data[:, :, j], xp[:, :, j:j + span:stride])
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for j in range(k):
            xs = xp[:, :, j:j + span:stride]
            dw[:, :, j] = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
            if dxp is not None:
                dxp[:, :, j:j + span:stride] += np.matmul(w.data[:, :, j].T, g)
        dx = dxp[:, :, left:left + length] if dxp is not None else None
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return result(out, inputs, backward)


def maxpool1d(x: Tensor, pool: int = 2, stride: int | None = None) -> Tensor:
    """Max over windows along time; ties route the gradient to the first index."""
    stride = pool if stride is None else stride
    n, c, length = x.shape
    if length < pool:
        raise ShapeMismatch(f"maxpool window {pool} longer than sequence {length}")
    t_out = (length - pool) // stride + 1
    win = sliding_window_view(x.data, pool, axis=2)[:, :, ::stride][:, :, :t_out]
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    pos = idx + (np.arange(t_out) * stride)[None, None, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        if stride >= pool:
            np.put_along_axis(dx, pos, g, axis=2)
        else:
            nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(dx, (nn[..., None], cc[..., None], pos), g)
        return (dx,)

    return result(np.ascontiguousarray(out), (x,), backward)


def gap(x: Tensor) -> Tensor:
    """Global average pooling over the last (time) axis."""
    length = x.shape[-1]

    def backward(g):
        return (np.broadcast_to(g[..., None] / length, x.shape).astype(x.dtype),)

    return result(x.data.mean(axis=-1), (x,), backward)


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or for ``p == 0``."""
    if mode == "eval" or p == 0:
        return x
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = ((rng.random(x.shape) >= p) / (1.0 - p)).astype(x.dtype)
    return result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# normalization

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.num_batches_tracked, self.momentum, self.eps)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and time for ``x (N, C, T)``.

    Train mode also folds the batch moments into the running statistics.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm1d shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    eps = state.eps
    gam = gamma.data[None, :, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2]
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * var).astype(state.running_var.dtype)
        state.num_batches_tracked += 1

        def backward(g):
            dxhat = g * gam
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            dx = inv_std[None, :, None] / m * (m * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    elif mode == "eval":
        if state.num_batches_tracked == 0:
            raise UninitializedState("batchnorm running statistics are unset; run a train step first")
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype)
        xhat = (x.data - state.running_mean[None, :, None]) * inv_std[None, :, None]

        def backward(g):
            return g * gam * inv_std[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    y = (gam * xhat + beta.data[None, :, None]).astype(x.dtype, copy=False)
    return result(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# dense, recurrent and loss

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x (N, in) @ w.T + b`` with ``w (out, in)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"dense shapes x={x.shape} w={w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return result(out, (x, w) if b is None else (x, w, b), backward)


def lstm(x: Tensor, kernel: Tensor, recurrent: Tensor, bias: Tensor,
         reverse: bool = False) -> Tensor:
    """Single-direction LSTM over ``x (N, C, T)`` returning the full ``(N, d, T)`` sequence.

    Gate rows of ``kernel (4d, C)``, ``recurrent (4d, d)`` and ``bias (4d,)`` are
    ordered input, forget, cell, output.  Zero initial state.  With
    ``reverse=True`` the sequence is consumed from the end and the outputs are
    written back at their original time positions.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"lstm expects (N, C, T), got {x.shape}")
    n, c, length = x.shape
    d4, c_k = kernel.shape
    d = d4 // 4
    if d4 != 4 * d or c_k != c or recurrent.shape != (d4, d) or bias.shape != (d4,):
        raise ShapeMismatch(
            f"lstm parameter shapes kernel={kernel.shape} recurrent={recurrent.shape} "
            f"bias={bias.shape} incompatible with input channels {c}")
    xs = x.data.transpose(2, 0, 1)
    if reverse:
        xs = xs[::-1]
    u = recurrent.data
    zx = xs @ kernel.data.T + bias.data
    dtype = zx.dtype

    gates = np.empty((length, n, d4), dtype=dtype)
    cells = np.empty((length, n, d), dtype=dtype)
    hs = np.empty((length, n, d), dtype=dtype)
    h = np.zeros((n, d), dtype=dtype)
    cell = np.zeros((n, d), dtype=dtype)
    for t in range(length):
        z = zx[t] + h @ u.T
        gt = gates[t]
        gt[:, :2 * d] = _sigmoid(z[:, :2 * d])
        gt[:, 2 * d:3 * d] = np.tanh(z[:, 2 * d:3 * d])
        gt[:, 3 * d:] = _sigmoid(z[:, 3 * d:])
        cell = gt[:, d:2 * d] * cell + gt[:, :d] * gt[:, 2 * d:3 * d]
        h = gt[:, 3 * d:] * np.tanh(cell)
        cells[t] = cell
        hs[t] = h

    seq = hs[::-1] if reverse else hs
    out = np.ascontiguousarray(seq.transpose(1, 2, 0))

    def backward(g):
        gh = g.transpose(2, 0, 1)
        if reverse:
            gh = gh[::-1]
        dz = np.empty_like(gates)
        dh_next = np.zeros((n, d), dtype=dtype)
        dc_next = np.zeros((n, d), dtype=dtype)
        zeros = np.zeros((n, d), dtype=dtype)
        for t in range(length - 1, -1, -1):
            gt = gates[t]
            i, f, gg, o = gt[:, :d], gt[:, d:2 * d], gt[:, 2 * d:3 * d], gt[:, 3 * d:]
            tc = np.tanh(cells[t])
            c_prev = cells[t - 1] if t > 0 else zeros
            dh = gh[t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dzt = dz[t]
            dzt[:, :d] = dc * gg * i * (1 - i)
            dzt[:, d:2 * d] = dc * c_prev * f * (1 - f)
            dzt[:, 2 * d:3 * d] = dc * i * (1 - gg * gg)
            dzt[:, 3 * d:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dzt @ u
        h_prev = np.concatenate([zeros[None], hs[:-1]], axis=0)
        d_kernel = np.tensordot(dz, xs, axes=([0, 1], [0, 1]))
        d_recurrent = np.tensordot(dz, h_prev, axes=([0, 1], [0, 1]))
        d_bias = dz.sum(axis=(0, 1))
        dxs = dz @ kernel.data
        if reverse:
            dxs = dxs[::-1]
        return np.ascontiguousarray(dxs.transpose(1, 2, 0)), d_kernel, d_recurrent, d_bias

    return result(out, (x, kernel, recurrent, bias), backward)


def bilstm(x: Tensor, fwd: tuple[Tensor, Tensor, Tensor], bwd: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """Forward and backward LSTM passes concatenated per step: ``(N, 2d, T)``."""
    return concat([lstm(x, *fwd), lstm(x, *bwd, reverse=True)], axis=1)


def _check_targets(targets: np.ndarray, k: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim != 1 or not np.issubdtype(targets.dtype, np.integer):
        raise IndexOutOfRange("targets must be a 1-D integer array")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexOutOfRange(f"target index outside 0..{k - 1}")
    return targets


def weighted_ce_from_probs(probs: np.ndarray, targets, weights=None) -> float:
    """Mean of ``-w[y] * log(clip(p[y]))`` over the batch, on probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = _check_targets(targets, probs.shape[1])
    w = np.ones(probs.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    p = np.clip(probs[np.arange(len(targets)), targets], PROB_CLIP, 1 - PROB_CLIP)
    return float(np.mean(-w[targets] * np.log(p)))


def weighted_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Class-weighted sparse cross-entropy taken on logits.

    Numerically equal to :func:`weighted_ce_from_probs` applied to
    ``softmax(logits)``; the gradient is formed directly at the logits
    (``w[y] * (p - onehot) / N``) and vanishes where the clip is active.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    targets = _check_targets(targets, k)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ShapeMismatch(f"class weights shape {w.shape} != ({k},)")
    p = _softmax(logits.data.astype(np.float64), axis=1)
    rows = np.arange(n)
    py = p[rows, targets]
    clipped = (py < PROB_CLIP) | (py > 1 - PROB_CLIP)
    wy = w[targets]
    loss = np.mean(-wy * np.log(np.clip(py, PROB_CLIP, 1 - PROB_CLIP)))

    def backward(g):
        dl = p.copy()
        dl[rows, targets] -= 1.0
        dl *= (wy * ~clipped / n)[:, None]
        return ((dl * g).astype(logits.dtype),)

    return result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
