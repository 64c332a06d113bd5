"""CNN, attention and BiLSTM classifier assembled from :mod:`ecg_tinynet.ops`.

Topology per sample ``x (C, T)``:

* three conv blocks, each ``[conv -> BN -> ReLU] x 2 -> maxpool -> dropout``
  (length ``T -> T/8``);
* optional attention gate ``A = sigmoid(conv1x1(F))``, ``F <- F * A``;
* optional two stacked BiLSTM layers;
* global average pooling, ``dense -> ReLU -> dropout -> dense -> softmax``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .exceptions import InvalidConfig, ShapeMismatch, UnknownVariant
from .ops import BatchNormState
from .tensor import DEFAULT_DTYPE, Rng, Tensor, init_params

VARIANTS = ("cnn", "cnn_attention", "cnn_bilstm", "full")


@dataclass(frozen=True)
class ConvBlock:
    channels: tuple[int, int]
    kernel_size: int
    pool: int = 2
    dropout: float = 0.3


@dataclass(frozen=True)
class AttentionConfig:
    enabled: bool = True
    # None means full-channel (C' -> C'); 1 gives a single gate broadcast over channels
    out_channels: int | None = None


@dataclass(frozen=True)
class BiLSTMConfig:
    enabled: bool = True
    hidden: tuple[int, ...] = (96, 64)


@dataclass(frozen=True)
class HeadConfig:
    units: int = 64
    dropout: float = 0.5


DEFAULT_BLOCKS = (
    ConvBlock((64, 64), 7),
    ConvBlock((128, 128), 5),
    ConvBlock((256, 256), 3),
)


@dataclass(frozen=True)
class ModelConfig:
    input_leads: int = 12
    num_classes: int = 9
    conv_blocks: tuple[ConvBlock, ...] = DEFAULT_BLOCKS
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    bilstm: BiLSTMConfig = field(default_factory=BiLSTMConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    @property
    def feature_channels(self) -> int:
        return self.conv_blocks[-1].channels[1]

    @property
    def attention_channels(self) -> int:
        out = self.attention.out_channels
        return self.feature_channels if out is None else out

    @property
    def time_factor(self) -> int:
        return int(np.prod([b.pool for b in self.conv_blocks]))

    def validate(self) -> "ModelConfig":
        if self.input_leads < 1 or self.num_classes < 2:
            raise InvalidConfig("need input_leads >= 1 and num_classes >= 2")
        if len(self.conv_blocks) != 3:
            raise InvalidConfig(f"exactly 3 conv blocks are required, got {len(self.conv_blocks)}")
        for i, blk in enumerate(self.conv_blocks, 1):
            if len(blk.channels) != 2 or min(blk.channels) < 1:
                raise InvalidConfig(f"block {i} needs two positive channel widths")
            if blk.kernel_size < 1 or blk.pool < 1:
                raise InvalidConfig(f"block {i} kernel and pool must be >= 1")
            if not 0 <= blk.dropout < 1:
                raise InvalidConfig(f"block {i} dropout must be in [0, 1)")
        if self.attention.enabled and self.attention_channels not in (1, self.feature_channels):
            raise InvalidConfig(
                f"attention out_channels must be 1 or {self.feature_channels}, "
                f"got {self.attention.out_channels}")
        if self.bilstm.enabled and (not self.bilstm.hidden or min(self.bilstm.hidden) < 1):
            raise InvalidConfig("bilstm needs at least one positive hidden size")
        if self.head.units < 1 or not 0 <= self.head.dropout < 1:
            raise InvalidConfig("head units must be >= 1 and dropout in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            blocks = tuple(ConvBlock(tuple(b["channels"]), int(b["kernel_size"]), int(b.get("pool", 2)),
                                     float(b.get("dropout", 0.3))) for b in d["conv_blocks"])
            att = d.get("attention", {})
            lstm = d.get("bilstm", {})
            head = d.get("head", {})
            return cls(
                input_leads=int(d["input_leads"]),
                num_classes=int(d["num_classes"]),
                conv_blocks=blocks,
                attention=AttentionConfig(bool(att.get("enabled", True)), att.get("out_channels")),
                bilstm=BiLSTMConfig(bool(lstm.get("enabled", True)), tuple(int(h) for h in lstm.get("hidden", (96, 64)))),
                head=HeadConfig(int(head.get("units", 64)), float(head.get("dropout", 0.5))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad model config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def tiny_config(input_leads: int = 1, num_classes: int = 3, width: int = 8,
                hidden: int = 8, dropout: float = 0.0) -> ModelConfig:
    """Small topology-preserving config for tests and desk-scale runs."""
    return ModelConfig(
        input_leads=input_leads,
        num_classes=num_classes,
        conv_blocks=tuple(ConvBlock((width, width), k, 2, dropout) for k in (7, 5, 3)),
        bilstm=BiLSTMConfig(True, (hidden, hidden)),
        head=HeadConfig(width, dropout),
    )


def variant(config: ModelConfig, which: str) -> ModelConfig:
    """Toggle attention/BiLSTM to produce one of the four ablation variants."""
    if which not in VARIANTS:
        raise UnknownVariant(f"unknown variant {which!r}; expected one of {VARIANTS}")
    att = which in ("cnn_attention", "full")
    lstm = which in ("cnn_bilstm", "full")
    return replace(config, attention=replace(config.attention, enabled=att),
                   bilstm=replace(config.bilstm, enabled=lstm))


def variant_name(config: ModelConfig) -> str:
    return {(False, False): "cnn", (True, False): "cnn_attention",
            (False, True): "cnn_bilstm", (True, True): "full"}[
        (config.attention.enabled, config.bilstm.enabled)]


# ---------------------------------------------------------------------------
# parameter layout

def _param_specs(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """Yield ``(name, shape, init scheme)`` for every trainable tensor, in canonical order."""
    c_in = config.input_leads
    for i, blk in enumerate(config.conv_blocks, 1):
        for j, c_out in enumerate(blk.channels, 1):
            yield f"block{i}.conv{j}.weight", (c_out, c_in, blk.kernel_size), "he"
            yield f"block{i}.conv{j}.bias", (c_out,), "zeros"
            yield f"block{i}.bn{j}.gamma", (c_out,), "ones"
            yield f"block{i}.bn{j}.beta", (c_out,), "zeros"
            c_in = c_out
    if config.attention.enabled:
        a = config.attention_channels
        yield "attention.weight", (a, c_in, 1), "glorot"
        yield "attention.bias", (a,), "zeros"
    if config.bilstm.enabled:
        for layer, d in enumerate(config.bilstm.hidden, 1):
            for direction in ("fwd", "bwd"):
                yield f"bilstm{layer}.{direction}.kernel", (4 * d, c_in), "glorot"
                yield f"bilstm{layer}.{direction}.recurrent", (4 * d, d), "glorot"
                yield f"bilstm{layer}.{direction}.bias", (4 * d,), "lstm_bias"
            c_in = 2 * d
    yield "head.dense1.weight", (config.head.units, c_in), "he"
    yield "head.dense1.bias", (config.head.units,), "zeros"
    yield "head.dense2.weight", (config.num_classes, config.head.units), "glorot"
    yield "head.dense2.bias", (config.num_classes,), "zeros"


def bn_names(config: ModelConfig) -> list[tuple[str, int]]:
    return [(f"block{i}.bn{j}", c) for i, blk in enumerate(config.conv_blocks, 1)
            for j, c in enumerate(blk.channels, 1)]


def buffer_names(config: ModelConfig) -> list[str]:
    return [f"{bn}.{buf}" for bn, _ in bn_names(config)
            for buf in ("running_mean", "running_var", "num_batches_tracked")]


def param_names(config: ModelConfig) -> list[str]:
    return [name for name, _, _ in _param_specs(config)]


def canonical_names(config: ModelConfig) -> list[str]:
    """All archived names: trainable tensors followed by BN buffers."""
    return param_names(config) + buffer_names(config)


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable parameter count (BN running statistics excluded)."""
    config.validate()
    total = 0
    c_in = config.input_leads
    for blk in config.conv_blocks:
        for c_out in blk.channels:
            total += c_in * c_out * blk.kernel_size + c_out  # conv
            total += 2 * c_out                               # BN gamma, beta
            c_in = c_out
    if config.attention.enabled:
        a = config.attention_channels
        total += c_in * a + a
    if config.bilstm.enabled:
        for d in config.bilstm.hidden:
            total += 2 * 4 * ((c_in + d) * d + d)
            c_in = 2 * d
    units = config.head.units
    total += c_in * units + units
    total += units * config.num_classes + config.num_classes
    return total


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Canonical name -> array, including BN buffers."""
        out = {name: t.data for name, t in self.tensors.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
            out[f"{name}.num_batches_tracked"] = np.array([st.num_batches_tracked], dtype=np.int64)
        return out

    @classmethod
    def from_state_dict(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "ModelParams":
        tensors = {name: Tensor(np.array(state[name]), requires_grad=True) for name in param_names(config)}
        bn = {}
        for name, _ in bn_names(config):
            bn[name] = BatchNormState(np.array(state[f"{name}.running_mean"]),
                                      np.array(state[f"{name}.running_var"]),
                                      int(np.asarray(state[f"{name}.num_batches_tracked"]).ravel()[0]))
        return cls(config, tensors, bn)

    def copy(self) -> "ModelParams":
        return ModelParams.from_state_dict(self.config, {k: v.copy() for k, v in self.state_dict().items()})

    def astype(self, dtype) -> "ModelParams":
        state = {k: (v if v.dtype.kind == "i" else v.astype(dtype)) for k, v in self.state_dict().items()}
        return ModelParams.from_state_dict(self.config, state)


def build(config: ModelConfig, rng: Rng | int = 0, dtype=DEFAULT_DTYPE) -> ModelParams:
    """Initialise all parameters; identical seeds give bitwise-identical tensors.

    LSTM biases start at zero except the forget gate, which starts at one.
    """
    config.validate()
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    gen = rng.stream("init")
    tensors: dict[str, Tensor] = {}
    for name, shape, scheme in _param_specs(config):
        if scheme in ("he", "glorot"):
            t = init_params(shape, scheme, gen, dtype)
        elif scheme == "ones":
            t = init_params(shape, "constant", gen, dtype, fill=1.0)
        elif scheme == "lstm_bias":
            t = init_params(shape, "constant", gen, dtype)
            d = shape[0] // 4
            t.data[d:2 * d] = 1.0
        else:
            t = init_params(shape, "constant", gen, dtype)
        t.name = name
        tensors[name] = t
    bn = {name: BatchNormState.create(c, dtype) for name, c in bn_names(config)}
    return ModelParams(config, tensors, bn)


# ---------------------------------------------------------------------------
# forward pass

@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    attention_map: Tensor | None
    conv_features: Tensor
    features: Tensor


def forward(params: ModelParams, x, mode: str = "eval",
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Run the network on ``x`` of shape ``(N, C, T)`` or ``(C, T)``.

    ``T`` must be divisible by the total pool factor (8 for the default
    topology).  Train mode uses batch statistics and dropout; eval mode is
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    p = params.tensors
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.dtype))
    if x.ndim == 2:
        x = Tensor(x.data[None], requires_grad=x.requires_grad)
    if x.ndim != 3 or x.shape[1] != cfg.input_leads:
        raise ShapeMismatch(f"expected input (N, {cfg.input_leads}, T), got {x.shape}")
    if x.shape[2] % cfg.time_factor or x.shape[2] == 0:
        raise ShapeMismatch(f"sequence length {x.shape[2]} is not a positive multiple of {cfg.time_factor}")
    if mode == "train" and rng is None:
        rng = Rng(0).stream("dropout")

    h = x
    for i, blk in enumerate(cfg.conv_blocks, 1):
        for j in (1, 2):
            h = ops.conv1d(h, p[f"block{i}.conv{j}.weight"], p[f"block{i}.conv{j}.bias"])
            h = ops.batchnorm1d(h, p[f"block{i}.bn{j}.gamma"], p[f"block{i}.bn{j}.beta"],
                                params.bn[f"block{i}.bn{j}"], mode)
            h = ops.relu(h)
        h = ops.maxpool1d(h, blk.pool)
        h = ops.dropout(h, blk.dropout, mode, rng)
    conv_features = h

    att = None
    if cfg.attention.enabled:
        att = ops.sigmoid(ops.conv1d(h, p["attention.weight"], p["attention.bias"]))
        h = ops.mul(h, att)

    if cfg.bilstm.enabled:
        for layer in range(1, len(cfg.bilstm.hidden) + 1):
            fwd = tuple(p[f"bilstm{layer}.fwd.{k}"] for k in ("kernel", "recurrent", "bias"))
            bwd = tuple(p[f"bilstm{layer}.bwd.{k}"] for k in ("kernel", "recurrent", "bias"))
            h = ops.bilstm(h, fwd, bwd)

    z = ops.gap(h)
    z = ops.relu(ops.dense(z, p["head.dense1.weight"], p["head.dense1.bias"]))
    z_drop = ops.dropout(z, cfg.head.dropout, mode, rng)
    logits = ops.dense(z_drop, p["head.dense2.weight"], p["head.dense2.bias"])
    return ForwardResult(logits, ops.softmax(logits), att, conv_features, z)


def predict_proba(params: ModelParams, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities for a batch, processed in chunks."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    out = [forward(params, x[s:s + batch_size].astype(params.dtype, copy=False)).probs.data
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.num_classes))
