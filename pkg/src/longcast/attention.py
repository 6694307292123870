"""Full attention, query sparsity measurements and ProbSparse attention.

All functions take ``(..., L, d)`` tensors; leading axes are independent
slices (batch and heads). Query selection is computed outside the autodiff
tape: which rows get exact attention is a discrete choice, gradients flow
through the chosen rows and through the mean / cumulative-mean fallback.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Linear, Module
from .tensor import Rng, Tensor

KINDS = ("full", "probsparse")


@dataclass(frozen=True)
class AttentionSpec:
    heads: int = 1
    head_dim: int = 64
    factor: float = 5.0
    masked: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("attention heads and head_dim must be positive")
        if not self.factor > 0:
            raise ConfigError(f"sampling factor must be positive, got {self.factor}")

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim


@dataclass
class SparsityScores:
    measure: np.ndarray
    top_u_indices: np.ndarray
    sampled_key_indices: list = field(default_factory=list)

    @property
    def u(self) -> int:
        return len(self.top_u_indices)


# ---------------------------------------------------------------------------
# dot-product instrumentation
# ---------------------------------------------------------------------------

class DotProductCounter:
    """Tallies query-key dot products computed while active."""

    def __init__(self):
        self.sampling = 0
        self.attention = 0

    @property
    def total(self) -> int:
        return self.sampling + self.attention


_ACTIVE_COUNTERS: list[DotProductCounter] = []


@contextlib.contextmanager
def dot_product_counter():
    counter = DotProductCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _tally(kind: str, n: int) -> None:
    for counter in _ACTIVE_COUNTERS:
        setattr(counter, kind, getattr(counter, kind) + int(n))


# ---------------------------------------------------------------------------
# sizes
# ---------------------------------------------------------------------------

def active_query_count(length_q: int, factor: float) -> int:
    """u = ceil(c ln L_Q), clamped to [1, L_Q]."""
    return int(min(max(math.ceil(factor * math.log(length_q)), 1), length_q))


def sampled_key_count(length_k: int) -> int:
    """Keys sampled per query: ceil(ln L_K), clamped to [1, L_K]."""
    return int(min(max(math.ceil(math.log(length_k)), 1), length_k))


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, masked: bool) -> None:
    if q.shape[-1] == 0:
        raise DimensionError("attention head dimension must be positive")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if masked and q.shape[-2] != k.shape[-2]:
        raise DimensionError("masked attention needs equal query and key lengths")


def _slices(x: Tensor) -> int:
    return int(np.prod(x.shape[:-2], dtype=np.int64))


def causal_mask(length_q: int, length_k: int) -> np.ndarray:
    return np.arange(length_k)[None, :] <= np.arange(length_q)[:, None]


# ---------------------------------------------------------------------------
# canonical attention
# ---------------------------------------------------------------------------

def full_attention(q: Tensor, k: Tensor, v: Tensor, masked: bool = False) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V, optionally with a causal mask."""
    _check_qkv(q, k, v, masked)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.swap_last(k)), scale)
    _tally("attention", _slices(q) * q.shape[-2] * k.shape[-2])
    mask = causal_mask(q.shape[-2], k.shape[-2]) if masked else None
    return T.matmul(T.softmax_rows(scores, mask), v)


def attention_probabilities(q, k, masked: bool = False) -> np.ndarray:
    """Row-stochastic canonical attention matrix (no tape)."""
    q = np.asarray(getattr(q, "data", q), dtype=float)
    k = np.asarray(getattr(k, "data", k), dtype=float)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if masked:
        s = np.where(causal_mask(s.shape[-2], s.shape[-1]), s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# sparsity measurements
# ---------------------------------------------------------------------------

def sparsity_measure_exact(q, keys) -> float:
    """Log-sum-exp minus mean of the scaled scores of one query against all keys."""
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    keys = np.asarray(getattr(keys, "data", keys), dtype=np.float64)
    s = keys @ q / math.sqrt(q.shape[-1])
    top = s.max()
    return float(top + math.log(np.exp(s - top).sum()) - s.mean())


def sparsity_measure_exact_rows(q, keys) -> np.ndarray:
    """Vectorised exact measurement for every query row."""
    q = np.asarray(getattr(q, "data", q), dtype=np.float64)
    keys = np.asarray(getattr(keys, "data", keys), dtype=np.float64)
    s = q @ np.swapaxes(keys, -1, -2) / math.sqrt(q.shape[-1])
    top = s.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(s - top).sum(axis=-1))
    return lse - s.mean(axis=-1)


def sample_keys(gen: np.random.Generator, lead: tuple, length_q: int, length_k: int,
                per_query: int, masked: bool = False):
    """Draw ``per_query`` distinct key indices for every query (Floyd's method).

    With ``masked`` query ``i`` samples only from keys ``0..i``. The number
    of random draws depends on shapes only, never on data. Returns
    ``(index, valid)`` of shape ``lead + (length_q, per_query)``; invalid
    slots (rows with fewer eligible keys) repeat the first sample.
    """
    s = per_query
    if masked:
        pool = np.minimum(np.arange(length_q) + 1, length_k)
    else:
        pool = np.full(length_q, length_k)
    take = np.minimum(pool, s)
    draws = gen.random(lead + (length_q, s))
    chosen = np.zeros(lead + (length_q, s), dtype=np.int64)
    for step in range(s):
        top = pool - take + step
        t = np.minimum(np.floor(draws[..., step] * (top + 1)).astype(np.int64), top)
        if step:
            seen = (chosen[..., :step] == t[..., None]).any(axis=-1)
            t = np.where(seen, top, t)
        chosen[..., step] = t
    valid = np.arange(s)[None, :] < take[:, None]
    valid = np.broadcast_to(valid, chosen.shape)
    chosen = np.where(valid, chosen, chosen[..., :1])
    return chosen, valid


def _gather_keys(keys: np.ndarray, index: np.ndarray) -> np.ndarray:
    lead = keys.shape[:-2]
    length_k, d = keys.shape[-2:]
    flat_k = keys.reshape((-1, length_k, d))
    flat_i = index.reshape((flat_k.shape[0], -1))
    picked = flat_k[np.arange(flat_k.shape[0])[:, None], flat_i]
    return picked.reshape(lead + index.shape[-2:] + (d,))


def max_mean_measure(q: np.ndarray, keys: np.ndarray, index: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """max - mean of the scaled scores over each query's sampled keys."""
    picked = _gather_keys(keys, index)
    s = np.einsum("...qd,...qsd->...qs", q, picked) / math.sqrt(q.shape[-1])
    _tally("sampling", int(valid.sum()))
    top = np.where(valid, s, -np.inf).max(axis=-1)
    avg = np.where(valid, s, 0.0).sum(axis=-1) / valid.sum(axis=-1)
    return top - avg


def top_u(measure: np.ndarray, u: int) -> np.ndarray:
    """Indices of the ``u`` largest entries per row, ties to the lower index, ascending."""
    order = np.argsort(-measure, axis=-1, kind="stable")[..., :u]
    return np.sort(order, axis=-1)


def causal_top_u(measure: np.ndarray, u: int):
    """Causal selection: row ``i`` is active iff it ranks within the top ``u``
    of rows ``0..i`` (ties to the lower index).

    Each decision depends only on the prefix, so later rows can never change
    which earlier rows are active. Returns ``(index, valid)`` padded to the
    largest active count across slices.
    """
    length = measure.shape[-1]
    earlier = np.tril(np.ones((length, length), dtype=bool), k=-1)
    ahead = (measure[..., None, :] >= measure[..., :, None]) & earlier
    active = ahead.sum(axis=-1) < u
    counts = active.sum(axis=-1)
    width = int(counts.max())
    # stable sort puts active rows first, in ascending position
    order = np.argsort(~active, axis=-1, kind="stable")[..., :width]
    valid = np.arange(width) < counts[..., None]
    last = np.take_along_axis(order, np.maximum(counts - 1, 0)[..., None], axis=-1)
    index = np.where(valid, order, last)
    return index, valid


def sparsity_measure_sampled(q, keys, factor: float = 5.0, rng=None) -> SparsityScores:
    """Sampled max-mean measurement and Top-u selection for one head."""
    q = np.asarray(getattr(q, "data", q))
    keys = np.asarray(getattr(keys, "data", keys))
    length_q, length_k = q.shape[-2], keys.shape[-2]
    gen = T.as_generator(rng)
    index, valid = sample_keys(gen, q.shape[:-2], length_q, length_k, sampled_key_count(length_k))
    measure = max_mean_measure(q, keys, index, valid)
    chosen = top_u(measure, active_query_count(length_q, factor))
    sampled = [row[ok] for row, ok in zip(index.reshape(-1, index.shape[-1]), valid.reshape(-1, valid.shape[-1]))]
    return SparsityScores(measure=measure, top_u_indices=chosen, sampled_key_indices=sampled)


# ---------------------------------------------------------------------------
# ProbSparse attention
# ---------------------------------------------------------------------------

def select_queries(q: np.ndarray, keys: np.ndarray, factor: float, masked: bool, gen):
    """Return ``(index, valid, measure)`` of the rows that get exact attention."""
    length_q, length_k = q.shape[-2], keys.shape[-2]
    index, valid = sample_keys(gen, q.shape[:-2], length_q, length_k,
                               sampled_key_count(length_k), masked=masked)
    measure = max_mean_measure(q, keys, index, valid)
    u = active_query_count(length_q, factor)
    if masked:
        chosen, ok = causal_top_u(measure, u)
    else:
        chosen = top_u(measure, u)
        ok = np.ones(chosen.shape, dtype=bool)
    return chosen, ok, measure


def probsparse_attention(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec | None = None,
                         rng=None, return_scores: bool = False):
    """Exact attention for the dominant queries, mean of V for the rest.

    Unmasked: Top-u rows under the sampled max-mean measurement; the others
    receive mean(V). Masked: rows chosen by :func:`causal_top_u`, attention is
    causal, the others receive the inclusive cumulative mean of V.
    """
    spec = spec or AttentionSpec(head_dim=q.shape[-1])
    masked = spec.masked
    _check_qkv(q, k, v, masked)
    length_q, length_k = q.shape[-2], k.shape[-2]
    u = active_query_count(length_q, spec.factor)
    if u >= length_q:
        out = full_attention(q, k, v, masked)
        if return_scores:
            everything = np.broadcast_to(np.arange(length_q), q.shape[:-2] + (length_q,))
            return out, SparsityScores(np.zeros(q.shape[:-1]), everything.copy(), [])
        return out

    gen = T.as_generator(rng if rng is not None else spec.seed)
    index, valid, measure = select_queries(q.data, k.data, spec.factor, masked, gen)

    scale = 1.0 / math.sqrt(q.shape[-1])
    picked = T.take_rows(q, index)
    scores = T.mul(T.rowwise_matmul(picked, T.swap_last(k)), scale)
    _tally("attention", int(valid.sum()) * length_k)
    mask = None
    if masked:
        mask = np.arange(length_k) <= index[..., None]
    weights = T.softmax_rows(scores, mask)
    rows = T.rowwise_matmul(weights, v)

    out_shape = q.shape[:-1] + (v.shape[-1],)
    if masked:
        counts = np.arange(1, length_k + 1, dtype=v.dtype)[:, None]
        base = T.div(T.cumsum(v, axis=-2), counts)
    else:
        base = T.broadcast_to(T.mean(v, axis=-2, keepdims=True), out_shape)
    out = T.replace_rows(base, index, rows, valid if masked else None)
    if return_scores:
        return out, SparsityScores(measure=measure, top_u_indices=index, sampled_key_indices=[])
    return out


def attend(q: Tensor, k: Tensor, v: Tensor, spec: AttentionSpec, kind: str, rng=None) -> Tensor:
    if kind == "full":
        return full_attention(q, k, v, spec.masked)
    if kind == "probsparse":
        return probsparse_attention(q, k, v, spec, rng)
    raise ConfigError(f"attention kind must be one of {KINDS}, got {kind!r}")


# ---------------------------------------------------------------------------
# multi-head wrapper
# ---------------------------------------------------------------------------

class MultiHeadAttention(Module):
    """Per-head projections of width ``heads * head_dim`` and an output projection."""

    def __init__(self, d_model: int, spec: AttentionSpec, rng: Rng, dtype):
        if d_model % spec.heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={spec.heads}")
        width = spec.heads * spec.head_dim
        self.query = Linear(d_model, width, rng, dtype)
        self.key = Linear(d_model, width, rng, dtype)
        self.value = Linear(d_model, width, rng, dtype)
        self.output = Linear(width, d_model, rng, dtype)
        self._spec = spec

    @property
    def spec(self) -> AttentionSpec:
        return self._spec

    def __call__(self, x_q: Tensor, x_kv: Tensor, kind: str = "probsparse", rng=None) -> Tensor:
        return multihead(x_q, x_kv, self, self._spec, kind, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, length, width = x.shape[:-2], x.shape[-2], x.shape[-1]
    x = T.reshape(x, lead + (length, heads, width // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.shape[:-3]
    heads, length, d = x.shape[-3:]
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.reshape(T.transpose(x, axes), lead + (length, heads * d))


def multihead(x_q: Tensor, x_kv: Tensor, params: MultiHeadAttention, spec: AttentionSpec,
              kind: str = "probsparse", rng=None) -> Tensor:
    """Project, attend per head (each head samples independently), concatenate, project."""
    d_model = x_q.shape[-1]
    if d_model % spec.heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={spec.heads}")
    q = _split_heads(params.query(x_q), spec.heads)
    k = _split_heads(params.key(x_kv), spec.heads)
    v = _split_heads(params.value(x_kv), spec.heads)
    context = attend(q, k, v, spec, kind, rng)
    return params.output(_merge_heads(context))
