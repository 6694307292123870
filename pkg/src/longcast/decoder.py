"""Decoder with a start token, masked self-attention and generative or step-wise decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionSpec, MultiHeadAttention
from .embedding import EmbeddingParams, embed_input
from .errors import ConfigError, DimensionError
from .layers import FeedForward, LayerNorm, Linear, Module
from .tensor import Rng, Tensor

DECODE_MODES = ("generative", "dynamic")


@dataclass
class DecoderInput:
    """Start token followed by a zero-valued placeholder carrying future stamps.

    ``values`` and ``stamps`` are the raw (pre-embedding) inputs, shaped
    ``(..., token_len + pred_len, d_x)`` and ``(..., token_len + pred_len, p)``.
    """

    values: np.ndarray
    stamps: np.ndarray
    token_len: int
    pred_len: int
    embedded: Tensor

    @property
    def length(self) -> int:
        return self.token_len + self.pred_len

    @property
    def placeholder(self) -> np.ndarray:
        return self.values[..., self.token_len:, :]


def build_decoder_input(x_enc, stamps_enc, stamps_future, token_len: int,
                        embed_params: EmbeddingParams) -> DecoderInput:
    """Concatenate the last ``token_len`` encoder steps with a zero placeholder.

    ``stamps_future`` holds the true stamps of the ``pred_len`` target steps;
    target values never enter the decoder.
    """
    x_enc = np.asarray(x_enc.numpy() if isinstance(x_enc, Tensor) else x_enc)
    stamps_enc, stamps_future = np.asarray(stamps_enc), np.asarray(stamps_future)
    seq_len = x_enc.shape[-2]
    if not 0 <= token_len <= seq_len:
        raise ConfigError(f"label_len must lie in [0, seq_len={seq_len}], got {token_len}")
    pred_len = stamps_future.shape[-2]
    if pred_len < 1:
        raise DimensionError("decoder needs at least one future stamp")
    token = x_enc[..., seq_len - token_len:, :]
    placeholder = np.zeros(x_enc.shape[:-2] + (pred_len, x_enc.shape[-1]), dtype=x_enc.dtype)
    values = np.concatenate([token, placeholder], axis=-2)
    stamps = np.concatenate([stamps_enc[..., seq_len - token_len:, :], stamps_future], axis=-2)
    return DecoderInput(values, stamps, token_len, pred_len, embed_input(values, stamps, embed_params))


class DecoderLayer(Module):
    def __init__(self, d_model: int, d_ffn: int, self_spec: AttentionSpec, cross_spec: AttentionSpec,
                 rng: Rng, dtype, dropout: float = 0.1):
        self.self_attention = MultiHeadAttention(d_model, self_spec, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.cross_attention = MultiHeadAttention(d_model, cross_spec, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ffn, rng, dtype)
        self.norm3 = LayerNorm(d_model, dtype)
        self._dropout = dropout

    def __call__(self, x: Tensor, memory: Tensor, kind: str = "probsparse",
                 training: bool = False, rng=None) -> Tensor:
        p = self._dropout
        x = self.norm1(T.add(x, T.dropout(self.self_attention(x, x, kind, rng), p, training, rng)))
        # cross-attention over the encoder memory is always canonical
        x = self.norm2(T.add(x, T.dropout(self.cross_attention(x, memory, "full", rng), p, training, rng)))
        return self.norm3(T.add(x, T.dropout(self.ffn(x), p, training, rng)))


class Decoder(Module):
    def __init__(self, layers: int, d_model: int, d_ffn: int, d_y: int, self_spec: AttentionSpec,
                 cross_spec: AttentionSpec, rng: Rng, dtype, dropout: float = 0.1):
        if layers < 1:
            raise ConfigError(f"dec_layers must be positive, got {layers}")
        if not self_spec.masked:
            raise ConfigError("decoder self-attention must be masked")
        self.layers = [DecoderLayer(d_model, d_ffn, self_spec, cross_spec, rng, dtype, dropout)
                       for _ in range(layers)]
        self.projection = Linear(d_model, d_y, rng, dtype)
        self.forward_calls = 0

    def __call__(self, x: Tensor, memory: Tensor, kind: str = "probsparse",
                 training: bool = False, rng=None) -> Tensor:
        """One decoder forward: every layer, then the output projection, at all positions."""
        if memory.shape[-2] == 0:
            raise DimensionError("encoder output is empty")
        self.forward_calls += 1
        for layer in self.layers:
            x = layer(x, memory, kind, training, rng)
        return self.projection(x)


def _tail(y: Tensor, pred_len: int) -> Tensor:
    return T.getitem(y, (Ellipsis, slice(y.shape[-2] - pred_len, None), slice(None)))


def decode_generative(dec_in: DecoderInput, memory: Tensor, params: Decoder, kind: str = "probsparse",
                      training: bool = False, rng=None) -> Tensor:
    """All ``pred_len`` outputs from a single decoder forward."""
    return _tail(params(dec_in.embedded, memory, kind, training, rng), dec_in.pred_len)


def decode_dynamic(dec_in: DecoderInput, memory: Tensor, params: Decoder, embed_params: EmbeddingParams,
                   target_channels: Sequence[int], kind: str = "probsparse", rng=None) -> Tensor:
    """Step-wise decoding: ``pred_len`` forwards, each feeding its prediction back.

    After pass ``t`` the prediction at placeholder position ``t`` is written into
    ``target_channels`` of the raw values and the input is re-embedded. Returns
    a tensor detached from the tape.
    """
    channels = list(target_channels)
    values = dec_in.values.copy()
    embedded = dec_in.embedded
    out = None
    for step in range(dec_in.pred_len):
        y = params(embedded, memory, kind, False, rng).numpy()
        if out is None:
            out = np.empty(y.shape[:-2] + (dec_in.pred_len, y.shape[-1]), dtype=y.dtype)
        pos = dec_in.token_len + step
        out[..., step, :] = y[..., pos, :]
        if step + 1 < dec_in.pred_len:
            values[..., pos, channels] = y[..., pos, :]
            embedded = embed_input(values, dec_in.stamps, embed_params)
    return Tensor(out)


def decode(dec_in: DecoderInput, memory: Tensor, params: Decoder, mode: str = "generative", *,
           embed_params: EmbeddingParams | None = None, target_channels: Sequence[int] = (),
           kind: str = "probsparse", training: bool = False, rng=None) -> Tensor:
    if mode == "generative":
        return decode_generative(dec_in, memory, params, kind, training, rng)
    if mode == "dynamic":
        if embed_params is None:
            raise ConfigError("dynamic decoding needs the decoder embedding parameters")
        return decode_dynamic(dec_in, memory, params, embed_params, target_channels, kind, rng)
    raise ConfigError(f"decode mode must be one of {DECODE_MODES}, got {mode!r}")
