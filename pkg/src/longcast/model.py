"""Full forecaster: configuration, assembly, loss, checkpoints and memory estimates."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .attention import KINDS, AttentionSpec, active_query_count, sampled_key_count
from .decoder import DECODE_MODES, Decoder, build_decoder_input, decode
from .embedding import GRANULARITIES, EmbeddingParams, StampTables, embed_input
from .encoder import Encoder, StackSpec, effective_stacks, format_stacks, parse_stacks
from .errors import CheckpointError, ConfigError, DimensionError, ResourceError
from .layers import Module
from .tensor import Rng, Tensor

CHECKPOINT_FORMAT = "longcast-checkpoint"
CHECKPOINT_VERSION = 1

DEFAULT_STACKS = (StackSpec(3, 1), StackSpec(1, 0.25))


@dataclass(frozen=True)
class InformerConfig:
    """Architecture and window configuration; ``None`` head dims are derived as d_model // heads."""

    d_x: int = 7
    features: str = "M"
    target_index: int = -1
    seq_len: int = 96
    label_len: int = 48
    pred_len: int = 24
    d_model: int = 512
    enc_heads: int = 16
    enc_head_dim: int | None = None
    dec_heads: int = 8
    dec_head_dim: int | None = None
    d_ffn: int = 2048
    stacks: tuple = DEFAULT_STACKS
    dec_layers: int = 2
    dropout: float = 0.1
    factor: float = 5.0
    attn: str = "probsparse"
    distil: bool = True
    granularity: str = "hourly"
    alpha: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.stacks, str):
            object.__setattr__(self, "stacks", parse_stacks(self.stacks))
        else:
            object.__setattr__(self, "stacks", tuple(
                s if isinstance(s, StackSpec) else StackSpec(*s) for s in self.stacks))
        for name in ("d_x", "seq_len", "pred_len", "d_model", "enc_heads", "dec_heads", "d_ffn", "dec_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if not 0 <= self.label_len <= self.seq_len:
            raise ConfigError(f"label_len must lie in [0, seq_len={self.seq_len}], got {self.label_len}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even, got {self.d_model}")
        for site in ("enc", "dec"):
            heads = getattr(self, f"{site}_heads")
            dim = getattr(self, f"{site}_head_dim")
            if dim is None:
                if self.d_model % heads:
                    raise ConfigError(f"{site}_heads={heads} does not divide d_model={self.d_model}")
                object.__setattr__(self, f"{site}_head_dim", self.d_model // heads)
            elif heads * dim != self.d_model:
                raise ConfigError(
                    f"{site}_heads * {site}_head_dim = {heads}*{dim} != d_model={self.d_model}")
        if self.features not in ("S", "M"):
            raise ConfigError(f"features must be S or M, got {self.features!r}")
        if not -self.d_x <= self.target_index < self.d_x:
            raise ConfigError(f"target_index {self.target_index} out of range for d_x={self.d_x}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.factor > 0:
            raise ConfigError(f"factor must be positive, got {self.factor}")
        if self.attn not in KINDS:
            raise ConfigError(f"attn must be one of {KINDS}, got {self.attn!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {sorted(GRANULARITIES)}, got {self.granularity!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for s in self.stacks:
            s.input_length(self.seq_len)

    @property
    def d_y(self) -> int:
        return 1 if self.features == "S" else self.d_x

    @property
    def target_channels(self) -> list[int]:
        return [self.target_index % self.d_x] if self.features == "S" else list(range(self.d_x))

    def replace(self, **changes) -> "InformerConfig":
        # re-derive head dims unless given explicitly
        if "d_model" in changes or "enc_heads" in changes:
            changes.setdefault("enc_head_dim", None)
        if "d_model" in changes or "dec_heads" in changes:
            changes.setdefault("dec_head_dim", None)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["stacks"] = format_stacks(self.stacks)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "InformerConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in values.items()})

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "InformerConfig":
        values = {}
        for number, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"config line {number}: expected key=value, got {line!r}")
            values[key.strip()] = value.strip()
        return cls.from_dict(values)


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    name = f.name
    try:
        if name in ("enc_head_dim", "dec_head_dim"):
            return None if value in ("", "None") else int(value)
        if name == "distil":
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if name in ("dropout", "factor", "alpha"):
            return float(value)
        if name in ("stacks", "features", "attn", "granularity", "dtype"):
            return value
        return int(value)
    except ValueError:
        raise ConfigError(f"config field {name}: cannot parse {value!r}") from None


def load_config(path) -> InformerConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return InformerConfig.from_text(text)


class Informer(Module):
    """Embedding, encoder pyramid and generative decoder."""

    def __init__(self, config: InformerConfig, seed: int = 0):
        dtype = np.dtype(config.dtype)
        rng = Rng(seed)
        enc_spec = AttentionSpec(config.enc_heads, config.enc_head_dim, config.factor, masked=False)
        dec_self = AttentionSpec(config.dec_heads, config.dec_head_dim, config.factor, masked=True)
        dec_cross = AttentionSpec(config.dec_heads, config.dec_head_dim, config.factor, masked=False)
        tables = StampTables(config.granularity, config.d_model, rng, dtype)
        self.enc_embedding = EmbeddingParams(config.d_x, config.d_model, tables, rng, dtype,
                                             config.alpha, config.seq_len)
        # stamp tables are shared; the decoder gets its own value projection
        self.dec_embedding = EmbeddingParams(config.d_x, config.d_model, tables, rng, dtype,
                                             config.alpha, config.seq_len)
        self.encoder = Encoder(config.stacks, config.seq_len, config.d_model, config.d_ffn, enc_spec,
                               rng, dtype, config.dropout, config.distil)
        self.decoder = Decoder(config.dec_layers, config.d_model, config.d_ffn, config.d_y, dec_self,
                               dec_cross, rng, dtype, config.dropout)
        self._config = config
        self._seed = int(seed)

    @property
    def config(self) -> InformerConfig:
        return self._config

    @property
    def seed(self) -> int:
        return self._seed

    def forward(self, x_enc, stamps_enc, stamps_future, *, training: bool = False, rng=None,
                decode_mode: str = "generative") -> Tensor:
        """Predict ``(..., pred_len, d_y)`` from an encoder window and the future stamps.

        In eval mode with no ``rng`` the sampling stream restarts from the build
        seed, so repeated calls are deterministic.
        """
        cfg = self._config
        gen = T.as_generator(self._seed if rng is None else rng)
        x_enc = np.asarray(x_enc.numpy() if isinstance(x_enc, Tensor) else x_enc, dtype=cfg.dtype)
        if x_enc.shape[-2:] != (cfg.seq_len, cfg.d_x):
            raise DimensionError(f"encoder input must end in ({cfg.seq_len}, {cfg.d_x}), got {x_enc.shape}")
        stamps_future = np.asarray(stamps_future)
        if stamps_future.shape[-2] != cfg.pred_len:
            raise DimensionError(f"expected {cfg.pred_len} future stamps, got {stamps_future.shape[-2]}")
        if decode_mode == "dynamic" and training:
            raise ConfigError("dynamic decoding is an inference mode")
        memory = self.encode(x_enc, stamps_enc, training=training, rng=gen)
        dec_in = build_decoder_input(x_enc, stamps_enc, stamps_future, cfg.label_len, self.dec_embedding)
        return decode(dec_in, memory, self.decoder, decode_mode, embed_params=self.dec_embedding,
                      target_channels=cfg.target_channels, kind=cfg.attn, training=training, rng=gen)

    __call__ = forward

    def encode(self, x_enc, stamps_enc, *, training: bool = False, rng=None) -> Tensor:
        feed = embed_input(x_enc, stamps_enc, self.enc_embedding)
        feed = T.dropout(feed, self._config.dropout, training, rng)
        return self.encoder(feed, self._config.attn, training, rng)


def build(config: InformerConfig, seed: int = 0) -> Informer:
    return Informer(config, seed)


def mse_loss(prediction: Tensor, target) -> Tensor:
    return T.mse_loss(prediction, target)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_dict(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_state_dict(model: Module, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        value = np.asarray(state[name])
        if value.shape != p.shape:
            raise CheckpointError(f"parameter {name}: shape {value.shape} != expected {p.shape}")
        p.data = value.astype(p.dtype)


def save(model: Informer, path, extras: dict | None = None) -> None:
    """Write a self-describing JSON text checkpoint (floats in shortest round-trip decimal)."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": model.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.shape), "values": p.data.astype(np.float64).ravel().tolist()}
            for name, p in model.named_parameters()
        },
        "extras": extras or {},
    }
    Path(path).write_text(json.dumps(record), encoding="utf-8")


def load(path, expect: InformerConfig | None = None) -> tuple[Informer, dict]:
    """Rebuild a model from :func:`save` output; returns ``(model, extras)``."""
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is not valid (truncated or corrupt): {exc}") from None
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a longcast checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {record.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        config = InformerConfig.from_dict(record["config"])
        params = record["parameters"]
        state = {name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
                 for name, entry in params.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from None
    if expect is not None and expect != config:
        diff = [k for k, v in expect.to_dict().items() if config.to_dict()[k] != v]
        raise CheckpointError(f"checkpoint config differs from the requested config in: {', '.join(diff)}")
    model = Informer(config, record.get("seed", 0))
    load_state_dict(model, state)
    return model, record.get("extras", {})


# ---------------------------------------------------------------------------
# activation memory
# ---------------------------------------------------------------------------

def _score_entries(kind: str, length_q: int, length_k: int, factor: float) -> int:
    if kind == "full":
        return length_q * length_k
    u = active_query_count(length_q, factor)
    if u >= length_q:
        return length_q * length_k
    return length_q * sampled_key_count(length_k) + u * length_k


@dataclass(frozen=True)
class MemoryEstimate:
    entries: int
    itemsize: int
    batch_size: int
    per_layer: list = field(default_factory=list)

    @property
    def bytes(self) -> int:
        return self.entries * self.itemsize * self.batch_size


def estimate_activation_memory(config: InformerConfig, batch_size: int = 1) -> MemoryEstimate:
    """Rough count of stored forward activations for one batch.

    Counts attention score entries per head plus the ``4 d_model + d_ffn``
    wide activations of each block, per time step.
    """
    width = 4 * config.d_model + config.d_ffn
    per_layer = []
    for stack in effective_stacks(config.stacks, config.distil):
        for length in stack.layer_lengths(config.seq_len, config.distil):
            per_layer.append(config.enc_heads * _score_entries(config.attn, length, length, config.factor)
                             + length * width)
    memory = encoder_output_length(config)
    dec_len = config.label_len + config.pred_len
    for _ in range(config.dec_layers):
        per_layer.append(config.dec_heads * (_score_entries(config.attn, dec_len, dec_len, config.factor)
                                             + dec_len * memory) + dec_len * (width + config.d_model))
    return MemoryEstimate(sum(per_layer), np.dtype(config.dtype).itemsize, batch_size, per_layer)


def check_memory(config: InformerConfig, batch_size: int, budget_bytes: int) -> MemoryEstimate:
    estimate = estimate_activation_memory(config, batch_size)
    if estimate.bytes > budget_bytes:
        raise ResourceError(
            f"estimated activation memory {estimate.bytes / 2**20:.1f} MiB exceeds the budget of "
            f"{budget_bytes / 2**20:.1f} MiB (attn={config.attn}, distil={config.distil}, "
            f"seq_len={config.seq_len}, batch={batch_size})")
    return estimate


def parameter_count(config: InformerConfig) -> int:
    return build(config, 0).parameter_count()


def encoder_output_length(config: InformerConfig) -> int:
    stacks = effective_stacks(config.stacks, config.distil)
    return sum(s.output_length(config.seq_len, config.distil) for s in stacks)
