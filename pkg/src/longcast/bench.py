"""Instrumented cost accounting and statistical diagnostics for the attention variants."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (AttentionSpec, _split_heads, active_query_count, attention_probabilities,
                        dot_product_counter, full_attention, probsparse_attention, sampled_key_count,
                        sparsity_measure_exact_rows)
from .encoder import StackSpec, activation_lengths
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class CostReport:
    mode: str
    length: int
    dot_products: int
    sampling: int
    attention: int
    activation_lengths: list = field(default_factory=list)
    decoder_forwards: int = 0
    wall_clock: float = 0.0

    def to_line(self) -> str:
        stacks = "+".join(str(n) for n in self.activation_lengths) or "-"
        return (f"mode={self.mode} L={self.length} dot_products={self.dot_products} "
                f"sampling={self.sampling} attention={self.attention} activation_lengths={stacks} "
                f"decoder_forwards={self.decoder_forwards} seconds={self.wall_clock:.4f}")


def expected_probsparse_count(length: int, factor: float = 5.0) -> int:
    """Closed-form count of one head of unmasked self-attention of length ``length``."""
    u = active_query_count(length, factor)
    if u >= length:
        return length * length
    return length * sampled_key_count(length) + u * length


def count_dot_products(mode: str, length: int, d: int = 64, factor: float = 5.0, seed: int = 0,
                       stacks: Sequence[StackSpec] | None = None, decode_mode: str | None = None,
                       pred_len: int = 24) -> CostReport:
    """Run one head of self-attention under the counter and report the tally."""
    if length < 2:
        raise ConfigError(f"L must be at least 2, got {length}")
    gen = np.random.default_rng(seed)
    q, k, v = (Tensor(gen.standard_normal((1, length, d))) for _ in range(3))
    start = time.perf_counter()
    with T.no_grad(), dot_product_counter() as counter:
        if mode == "full":
            full_attention(q, k, v)
        elif mode == "probsparse":
            probsparse_attention(q, k, v, AttentionSpec(head_dim=d, factor=factor), rng=gen)
        else:
            raise ConfigError(f"mode must be full or probsparse, got {mode!r}")
    elapsed = time.perf_counter() - start
    lengths = memory_accounting(stacks, length) if stacks else []
    forwards = decode_step_count(decode_mode, pred_len, seed) if decode_mode else 0
    return CostReport(mode, length, counter.total, counter.sampling, counter.attention,
                      lengths, forwards, elapsed)


def memory_accounting(stacks: Sequence[StackSpec], length: int, distil: bool = True) -> list[int]:
    """Sum of the time lengths entering each attention layer, per stack."""
    return activation_lengths(stacks, length, distil)


def decode_step_count(decode_mode: str, pred_len: int = 24, seed: int = 0) -> int:
    """Decoder forwards used by one prediction of a small instrumented model."""
    from .model import InformerConfig, build

    cfg = InformerConfig(d_x=1, features="S", seq_len=16, label_len=8, pred_len=pred_len, d_model=16,
                         enc_heads=2, dec_heads=2, d_ffn=32, stacks="1:1", dec_layers=1, dtype="float64")
    model = build(cfg, seed)
    gen = np.random.default_rng(seed)
    stamps = np.zeros((1, cfg.seq_len + pred_len, 4), dtype=np.int64)
    with T.no_grad():
        model.forward(gen.standard_normal((1, cfg.seq_len, 1)), stamps[:, :cfg.seq_len],
                      stamps[:, cfg.seq_len:], decode_mode=decode_mode)
    return model.decoder.forward_calls


def bench_grid(lengths: Sequence[int] = (96, 336, 720), modes: Sequence[str] = ("full", "probsparse"),
               d: int = 64, factor: float = 5.0, seed: int = 0,
               stacks: Sequence[StackSpec] = (StackSpec(3, 1), StackSpec(1, 0.25))) -> list[CostReport]:
    return [count_dot_products(mode, L, d, factor, seed, stacks) for L in lengths for mode in modes]


# ---------------------------------------------------------------------------
# ranking agreement between the exact and the max-mean measurement
# ---------------------------------------------------------------------------

@dataclass
class AgreementResult:
    rate: float
    pairs: int
    agreements: int
    excluded_ties: int


def prop1_agreement(length_k: int = 64, d: int = 16, trials: int = 1000, seed: int = 3,
                    queries: str = "self", decile: float = 0.1) -> AgreementResult:
    """How often the max-mean ordering of two dominant queries matches the exact ordering.

    Keys are standard Gaussian. ``queries="self"`` scores the keys themselves
    as queries (self-attention); ``"independent"`` draws a fresh Gaussian
    query set. In each trial the queries in the top ``decile`` of the exact
    measurement are paired; a pair counts when one query has both the larger
    max-mean value and the larger score variance, and it agrees when that
    query also has the larger exact measurement. Pairs with equal max-mean
    values are excluded.
    """
    if trials < 100:
        raise ConfigError(f"trials must be at least 100, got {trials}")
    if queries not in ("self", "independent"):
        raise ConfigError(f"queries must be 'self' or 'independent', got {queries!r}")
    gen = np.random.default_rng(seed)
    agree = total = ties = 0
    top = max(2, int(math.ceil(decile * length_k)))
    for _ in range(trials):
        keys = gen.standard_normal((length_k, d))
        q = keys if queries == "self" else gen.standard_normal((length_k, d))
        scores = q @ keys.T / math.sqrt(d)
        exact = sparsity_measure_exact_rows(q, keys)
        maxmean = scores.max(axis=-1) - scores.mean(axis=-1)
        var = scores.var(axis=-1)
        chosen = np.argsort(-exact, kind="stable")[:top]
        i, j = np.triu_indices(top, k=1)
        a, b = chosen[i], chosen[j]
        same = maxmean[a] == maxmean[b]
        ties += int(same.sum())
        first = maxmean[a] > maxmean[b]
        hi = np.where(first, a, b)
        lo = np.where(first, b, a)
        keep = ~same & (var[hi] > var[lo])
        total += int(keep.sum())
        agree += int((keep & (exact[hi] > exact[lo])).sum())
    rate = agree / total if total else 1.0
    return AgreementResult(rate, total, agree, ties)


# ---------------------------------------------------------------------------
# long-tail attention mass
# ---------------------------------------------------------------------------

@dataclass
class MassCurve:
    """Average cumulative attention mass held by the top-``r`` keys of each row."""

    ranks: np.ndarray
    mass: np.ndarray

    def share_at(self, fraction: float) -> float:
        r = max(1, int(math.ceil(fraction * len(self.ranks))))
        return float(self.mass[r - 1])

    def to_lines(self) -> list[str]:
        return [f"{int(r)},{m!r}" for r, m in zip(self.ranks, self.mass.tolist())]


def mass_curve(probabilities: np.ndarray) -> MassCurve:
    p = np.asarray(probabilities, dtype=np.float64)
    p = p.reshape(-1, p.shape[-1])
    ordered = -np.sort(-p, axis=-1)
    mass = np.cumsum(ordered, axis=-1).mean(axis=0)
    return MassCurve(np.arange(1, p.shape[-1] + 1), mass)


def longtail_histogram(source, x_enc=None, stamps_enc=None, seed: int = 0) -> MassCurve:
    """Mass curve of canonical attention scores.

    ``source`` is either a ``(q, k)`` pair of arrays, a row-stochastic
    probability array, or a model whose first encoder attention layer is
    probed on ``(x_enc, stamps_enc)``.
    """
    if isinstance(source, tuple):
        q, k = source
        return mass_curve(attention_probabilities(q, k))
    if isinstance(source, np.ndarray):
        return mass_curve(source)
    return mass_curve(encoder_attention_probabilities(source, x_enc, stamps_enc))


def encoder_attention_probabilities(model, x_enc, stamps_enc) -> np.ndarray:
    from .embedding import embed_input

    with T.no_grad():
        feed = embed_input(np.asarray(x_enc, dtype=model.config.dtype), stamps_enc, model.enc_embedding)
        block = model.encoder.stacks[0].blocks[0]
        heads = block.attention.spec.heads
        q = _split_heads(block.attention.query(feed), heads)
        k = _split_heads(block.attention.key(feed), heads)
    return attention_probabilities(q.data, k.data)
