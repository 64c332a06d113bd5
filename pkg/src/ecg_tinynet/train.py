"""Optimisation loop: Adam with L2, step and plateau schedules, early stopping."""
from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .exceptions import DivergedLoss, InvalidConfig, NonFiniteGradient
from .metrics import argmax_predictions, confusion, prf
from .model import ModelParams, forward, predict_proba
from .tensor import Rng, Tape, clip_global_norm

log = logging.getLogger(__name__)

CLASS_WEIGHT_MODES = ("none", "inverse_frequency")
DECAYED_SUFFIXES = (".weight", ".kernel", ".recurrent")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    l2: float = 1e-3
    batch_size: int = 32
    step_halving_epochs: int = 20
    plateau_enabled: bool = True
    plateau_factor: float = 0.5
    plateau_patience: int = 8
    early_stop_patience: int = 15
    clip_norm: float = 1.0
    max_epochs: int = 100
    seed: int = 0
    class_weight_mode: str = "inverse_frequency"
    min_lr: float = 1e-6
    prefetch: int = 2
    target_f1: float | None = None  # stop as soon as val macro-F1 reaches this

    def validate(self) -> "TrainConfig":
        if self.lr0 < 0:
            raise InvalidConfig("lr0 must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfig("batch_size and max_epochs must be >= 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1 or self.step_halving_epochs < 1:
            raise InvalidConfig("patience values must be >= 1")
        if not 0 < self.plateau_factor <= 1:
            raise InvalidConfig("plateau_factor must lie in (0, 1]")
        if self.clip_norm <= 0:
            raise InvalidConfig("clip_norm must be positive")
        if self.class_weight_mode not in CLASS_WEIGHT_MODES:
            raise InvalidConfig(f"class_weight_mode must be one of {CLASS_WEIGHT_MODES}")
        if self.prefetch < 0:
            raise InvalidConfig("prefetch must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown [train] keys: {sorted(unknown)}")
        return cls(**d).validate()


def class_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights, mean 1 over the classes that occur, 0 elsewhere."""
    if hasattr(labels, "primary_labels"):
        labels = labels.primary_labels
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]
    w = np.zeros(num_classes)
    present = counts > 0
    w[present] = counts.sum() / (num_classes * counts[present])
    if present.any():
        w[present] /= w[present].mean()
    return w


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              l2: float = 0.0, decay: list[bool] | None = None) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied in place.

    L2 enters as ``g + l2 * theta`` before the moment updates, for tensors
    whose ``decay`` flag is set (all of them when ``decay`` is None).
    """
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or Inf; step skipped")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.step, 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if l2 and (decay is None or decay[i]):
            g = g + l2 * p
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# schedule

@dataclass
class PlateauState:
    best: float = -np.inf
    wait: int = 0
    scale: float = 1.0
    reductions: int = 0

    def update(self, monitor: float, config: TrainConfig) -> None:
        if monitor > self.best:
            self.best, self.wait = monitor, 0
            return
        self.wait += 1
        if config.plateau_enabled and self.wait >= config.plateau_patience:
            self.scale *= config.plateau_factor
            self.reductions += 1
            self.wait = 0


def lr_at(epoch: int, config: TrainConfig, plateau: PlateauState | None = None) -> float:
    lr = config.lr0 * 0.5 ** (epoch // config.step_halving_epochs)
    if plateau is not None and config.plateau_enabled:
        lr *= plateau.scale
    return max(lr, config.min_lr) if config.lr0 > 0 else 0.0


# ---------------------------------------------------------------------------
# batches

class BatchLoader:
    """Seeded shuffled mini-batches with optional background prefetch.

    The permutation is drawn before the worker starts, so prefetch depth never
    changes which samples land in which batch.
    """

    def __init__(self, dataset, batch_size: int, rng: np.random.Generator, prefetch: int = 2):
        self.dataset = dataset
        self.order = rng.permutation(len(dataset))
        self.batch_size = batch_size
        self.prefetch = prefetch

    def batches(self) -> list[np.ndarray]:
        return [self.order[s:s + self.batch_size] for s in range(0, len(self.order), self.batch_size)]

    def _load(self, idx):
        return self.dataset.take(idx), self.dataset.labels[idx]

    def __iter__(self):
        if self.prefetch == 0:
            for idx in self.batches():
                yield self._load(idx)
            return
        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def work():
            try:
                for idx in self.batches():
                    if stop.is_set():
                        return
                    q.put(self._load(idx))
                q.put(None)
            except BaseException as exc:  # surfaced in the consumer
                q.put(exc)

        t = threading.Thread(target=work, daemon=True)
        t.start()
        try:
            while (item := q.get()) is not None:
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            while t.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    t.join(0.01)


# ---------------------------------------------------------------------------
# run log

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_macro_f1: float
    lr: float
    max_grad_norm: float
    wall_time_s: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    @property
    def best_f1(self) -> float:
        return self.records[self.best_epoch].val_macro_f1 if self.records else float("nan")

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def deterministic_view(self) -> list[dict]:
        """Records without wall-clock fields, for run-to-run comparison."""
        return [{k: v for k, v in asdict(r).items() if k != "wall_time_s"} for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(EpochRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["is_best"])
            for r in self.records:
                w.writerow([getattr(r, n) for n in names] + [int(r.epoch == self.best_epoch)])

    @classmethod
    def read_jsonl(cls, path) -> "RunLog":
        recs = [EpochRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line]
        best = max(range(len(recs)), key=lambda i: (recs[i].val_macro_f1, -recs[i].val_loss, -i)) if recs else -1
        return cls(recs, [], best)


# ---------------------------------------------------------------------------
# fit

def macro_f1(true, pred, num_classes: int) -> float:
    cm = confusion(true, pred, num_classes)
    return float(np.mean([prf(cm, i)[2] for i in range(num_classes)]))


def _decay_mask(params: ModelParams) -> list[bool]:
    return [name.endswith(DECAYED_SUFFIXES) for name, _ in params.trainable()]


def fit(params: ModelParams, train_ds, val_ds, config: TrainConfig = TrainConfig(),
        run_dir=None) -> tuple[ModelParams, RunLog]:
    """Train ``params`` in place and return a copy of the best-scoring epoch."""
    config.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        from .exceptions import EmptyDataset
        raise EmptyDataset("training and validation sets must be non-empty")
    k = params.config.num_classes
    rng = Rng(config.seed)
    shuffle, drop = rng.stream("shuffle"), rng.stream("dropout")
    weights = class_weights(train_ds.labels, k) if config.class_weight_mode == "inverse_frequency" else None
    decay = _decay_mask(params)
    tensors = [t for _, t in params.trainable()]
    adam = AdamState.create([t.data for t in tensors])
    plateau = PlateauState()
    ckpt_dir = None
    if run_dir is not None:
        from .weights import save_weights
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    runlog = RunLog()
    best, best_f1, best_loss, since_best, bad_losses = params.copy(), -np.inf, np.inf, 0, 0
    val_x, val_y = val_ds.take(np.arange(len(val_ds))), val_ds.labels
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config, plateau)
        loss_sum, correct, seen, max_norm = 0.0, 0, 0, 0.0
        for xb, yb in BatchLoader(train_ds, config.batch_size, shuffle, config.prefetch):
            params.zero_grad()
            with Tape() as tape:
                out = forward(params, xb.astype(params.dtype, copy=False), "train", drop)
                loss = ops.weighted_cross_entropy(out.logits, yb, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                bad_losses += 1
                if bad_losses >= 2:
                    raise DivergedLoss(f"non-finite training loss twice in a row (epoch {epoch})")
                log.warning("non-finite loss at epoch %d; batch skipped", epoch)
                continue
            bad_losses = 0
            tape.backward(loss)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            grads, norm = clip_global_norm(grads, config.clip_norm)
            max_norm = max(max_norm, norm)
            adam_step([t.data for t in tensors], grads, adam, lr, config.l2, decay)
            loss_sum += value * len(yb)
            correct += int(np.sum(argmax_predictions(out.logits.data) == yb))
            seen += len(yb)

        probs = predict_proba(params, val_x)
        val_loss = ops.weighted_ce_from_probs(probs, val_y, weights)
        f1 = macro_f1(val_y, argmax_predictions(probs), k)
        runlog.records.append(EpochRecord(epoch, loss_sum / max(seen, 1), correct / max(seen, 1),
                                          float(val_loss), f1, lr, max_norm, time.perf_counter() - t0))
        # patience counts strict F1 gains only; equal F1 with lower val loss
        # still replaces the kept checkpoint
        since_best = 0 if f1 > best_f1 else since_best + 1
        if f1 > best_f1 or (f1 == best_f1 and val_loss < best_loss):
            best, best_f1, best_loss = params.copy(), f1, val_loss
            runlog.best_epoch = epoch
            if ckpt_dir is not None:
                path = ckpt_dir / f"epoch{epoch:04d}.ecgw"
                save_weights(best, path)
                runlog.checkpoints.append(str(path))
        plateau.update(f1, config)
        log.info("epoch %d loss %.4f val_f1 %.4f lr %.2e", epoch, runlog.records[-1].train_loss, f1, lr)
        if config.target_f1 is not None and f1 >= config.target_f1:
            runlog.stop_reason = "target"
            break
        if since_best >= config.early_stop_patience:
            runlog.stop_reason = "early_stop"
            break
    else:
        runlog.stop_reason = "max_epochs"

    if run_dir is not None:
        runlog.write_jsonl(Path(run_dir) / "runlog.jsonl")
        runlog.write_csv(Path(run_dir) / "runlog.csv")
    return best, runlog
