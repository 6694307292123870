"""Encoder: attention blocks, self-attention distilling and the stack pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from . import tensor as T
from .attention import AttentionSpec, MultiHeadAttention
from .errors import ConfigError, DimensionError
from .layers import Conv1d, FeedForward, LayerNorm, Module
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class StackSpec:
    """``layers`` attention blocks fed with the most recent ``fraction`` of the window."""

    layers: int
    fraction: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "fraction", Fraction(self.fraction).limit_denominator(1 << 16))
        if self.layers < 1:
            raise ConfigError(f"stack layer_count must be positive, got {self.layers}")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"stack input_fraction must lie in (0, 1], got {self.fraction}")

    def input_length(self, seq_len: int) -> int:
        length = self.fraction * seq_len
        if length.denominator != 1 or length < 1:
            raise ConfigError(f"stack fraction {self.fraction} of seq_len {seq_len} is not a positive integer")
        return int(length)

    def layer_lengths(self, seq_len: int, distil: bool = True) -> list[int]:
        """Time lengths entering each attention block of this stack."""
        lengths = [self.input_length(seq_len)]
        for _ in range(self.layers - 1):
            lengths.append(math.ceil(lengths[-1] / 2) if distil else lengths[-1])
        return lengths

    def output_length(self, seq_len: int, distil: bool = True) -> int:
        return self.layer_lengths(seq_len, distil)[-1]

    def __str__(self):
        return f"{self.layers}:{self.fraction}"


def parse_stacks(text: str) -> tuple[StackSpec, ...]:
    """Parse ``"3:1,1:1/4"`` into stack specs."""
    stacks = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        layers, _, fraction = item.partition(":")
        try:
            stacks.append(StackSpec(int(layers), Fraction(fraction or "1")))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad stack spec {item!r}; expected LAYERS:FRACTION, e.g. 3:1") from None
    if not stacks:
        raise ConfigError("at least one encoder stack is required")
    return tuple(stacks)


def format_stacks(stacks: Sequence[StackSpec]) -> str:
    return ",".join(str(s) for s in stacks)


def check_alignment(stacks: Sequence[StackSpec], seq_len: int, distil: bool = True) -> int:
    """Raise unless every stack yields the same output length; return that length."""
    outputs = [s.output_length(seq_len, distil) for s in stacks]
    if len(set(outputs)) != 1:
        detail = ", ".join(f"{s} -> {n}" for s, n in zip(stacks, outputs))
        raise ConfigError(f"encoder stacks produce misaligned output lengths ({detail})")
    return outputs[0]


def effective_stacks(stacks: Sequence[StackSpec], distil: bool = True) -> tuple[StackSpec, ...]:
    """Without distilling the halved replicas cannot align, so only the main stack is kept."""
    return tuple(stacks) if distil else tuple(stacks[:1])


def activation_lengths(stacks: Sequence[StackSpec], seq_len: int, distil: bool = True) -> list[int]:
    """Sum of time lengths entering the attention layers, per stack."""
    return [sum(s.layer_lengths(seq_len, distil)) for s in stacks]


class AttentionBlock(Module):
    def __init__(self, d_model: int, d_ffn: int, spec: AttentionSpec, rng: Rng, dtype, dropout: float = 0.1):
        self.attention = MultiHeadAttention(d_model, spec, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ffn, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self._dropout = dropout

    def __call__(self, x: Tensor, kind: str = "probsparse", training: bool = False, rng=None) -> Tensor:
        return attention_block(x, self, kind, training, rng)


def attention_block(x: Tensor, params: AttentionBlock, kind: str = "probsparse",
                    training: bool = False, rng=None) -> Tensor:
    """x + Dropout(MHA(x)) -> LayerNorm -> + Dropout(FFN) -> LayerNorm."""
    p = params._dropout
    attended = params.attention(x, x, kind, rng)
    x = params.norm1(T.add(x, T.dropout(attended, p, training, rng)))
    return params.norm2(T.add(x, T.dropout(params.ffn(x), p, training, rng)))


class Distill(Module):
    def __init__(self, d_model: int, rng: Rng, dtype):
        self.conv = Conv1d(d_model, d_model, rng, dtype, width=3, padding="replicate")

    def __call__(self, x: Tensor) -> Tensor:
        return distill(x, self)


def distill(x: Tensor, params: Distill) -> Tensor:
    """Conv1d(width 3) -> ELU -> MaxPool(kernel 3, stride 2, pad 1); halves the time axis."""
    if x.shape[-2] < 2:
        raise DimensionError(f"distilling needs at least 2 time steps, got {x.shape[-2]}")
    return T.maxpool1d(T.elu(params.conv(x)), kernel=3, stride=2, padding=1)


class EncoderStack(Module):
    def __init__(self, spec: StackSpec, d_model: int, d_ffn: int, attn: AttentionSpec,
                 rng: Rng, dtype, dropout: float = 0.1, distil: bool = True):
        self.blocks = [AttentionBlock(d_model, d_ffn, attn, rng, dtype, dropout) for _ in range(spec.layers)]
        self.distills = [Distill(d_model, rng, dtype) for _ in range(spec.layers - 1)] if distil else []
        self._spec = spec

    @property
    def spec(self) -> StackSpec:
        return self._spec

    def __call__(self, x: Tensor, kind: str, training: bool, rng, trace: list | None = None) -> Tensor:
        for i, block in enumerate(self.blocks):
            if trace is not None:
                trace.append(x.shape[-2])
            x = block(x, kind, training, rng)
            if i < len(self.distills):
                x = self.distills[i](x)
        return x


class Encoder(Module):
    def __init__(self, stacks: Sequence[StackSpec], seq_len: int, d_model: int, d_ffn: int,
                 attn: AttentionSpec, rng: Rng, dtype, dropout: float = 0.1, distil: bool = True):
        stacks = effective_stacks(stacks, distil)
        check_alignment(stacks, seq_len, distil)
        self.stacks = [EncoderStack(s, d_model, d_ffn, attn, rng, dtype, dropout, distil) for s in stacks]
        self._distil = distil
        self.last_trace: list[list[int]] = []

    def __call__(self, x: Tensor, kind: str = "probsparse", training: bool = False, rng=None) -> Tensor:
        return encode(x, [s.spec for s in self.stacks], self, kind, training, rng)


def encode(x_feed: Tensor, stacks: Sequence[StackSpec], params: Encoder, kind: str = "probsparse",
           training: bool = False, rng=None) -> Tensor:
    """Run every stack on its suffix of the window and concatenate along time."""
    seq_len = x_feed.shape[-2]
    check_alignment(stacks, seq_len, params._distil)
    outputs, trace = [], []
    for spec, stack in zip(stacks, params.stacks):
        start = seq_len - spec.input_length(seq_len)
        window = x_feed if start == 0 else T.getitem(x_feed, (Ellipsis, slice(start, None), slice(None)))
        lengths: list[int] = []
        outputs.append(stack(window, kind, training, rng, lengths))
        trace.append(lengths)
    params.last_trace = trace
    return outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=-2)
