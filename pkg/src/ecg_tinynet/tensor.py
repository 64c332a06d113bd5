"""Dense tensors with a reverse-mode gradient tape.

Operations (see :mod:`ecg_tinynet.ops`) record themselves on the tape that is
active in the current thread.  With no active tape nothing is recorded, so
inference carries no bookkeeping cost::

    with Tape() as tape:
        loss = some_op(params...)
    tape.backward(loss)

Records are appended in execution order, so walking them in reverse is a valid
topological order; gradients accumulate additively on fan-out.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module does the work
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.records.append((out, inputs, backward))

    def backward(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if root.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar root")
            grad = np.ones_like(root.data)
        root.grad = np.asarray(grad, dtype=root.dtype)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            for t, g in zip(inputs, fn(out.grad)):
                if g is None or not t.requires_grad:
                    continue
                # never in-place: g may alias a buffer owned elsewhere
                t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op output and record it when any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Seeded random streams

STREAMS = ("init", "dropout", "shuffle", "synth")


class Rng:
    """A 64-bit seed fanned out into independent named streams.

    ``Rng(seed).stream(name)`` always returns a fresh generator positioned at
    draw zero, so the same ``(seed, stream, draw index)`` yields the same value.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF

    def stream(self, name: str, *sub: int) -> np.random.Generator:
        if name not in STREAMS:
            raise ValueError(f"unknown rng stream {name!r}; expected one of {STREAMS}")
        key = (STREAMS.index(name),) + tuple(int(s) for s in sub)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def _fans(shape: Sequence[int]) -> tuple[int, int]:
    # (out, in, *kernel) layout for every weight in the package
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_params(shape, scheme: str, rng: np.random.Generator, dtype=DEFAULT_DTYPE,
                fill: float = 0.0) -> Tensor:
    """Create a trainable tensor.

    ``he`` draws from N(0, 2/fan_in) (conv and dense layers followed by ReLU);
    ``glorot`` draws from U(-a, a) with a = sqrt(6/(fan_in+fan_out)) (LSTM,
    attention, output layer); ``constant`` fills with ``fill``.
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "he":
        fan_in, _ = _fans(shape)
        data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    elif scheme == "glorot":
        fan_in, fan_out = _fans(shape)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    elif scheme == "constant":
        data = np.full(shape, fill)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data.astype(dtype), requires_grad=True)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], clip: float) -> tuple[list[np.ndarray], float]:
    """Jointly rescale ``grads`` by ``clip / max(clip, norm)``.

    Returns the rescaled list and the pre-clip global norm.
    """
    if clip <= 0:
        raise ValueError("clip must be positive")
    norm = global_norm(grads)
    if norm <= clip:
        return list(grads), norm
    scale = clip / norm
    return [(g * scale).astype(g.dtype, copy=False) for g in grads], norm
