"""Input representation: scalar projection + fixed positional code + time-stamp tables."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .layers import Conv1d, Module
from .tensor import Rng, Tensor

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

GRANULARITIES = {"hourly": 3600, "quarter-hourly": 900}

VOCAB = {"month": 12, "day": 31, "weekday": 7, "hour": 24, "quarter": 4}


def stamp_fields(granularity: str) -> tuple:
    if granularity == "hourly":
        return ("month", "day", "weekday", "hour")
    if granularity == "quarter-hourly":
        return ("month", "day", "weekday", "hour", "quarter")
    raise ConfigError(f"granularity must be one of {sorted(GRANULARITIES)}, got {granularity!r}")


@dataclass(frozen=True)
class StampVector:
    """0-based calendar indices of one time step."""

    month: int
    day: int
    weekday: int
    hour: int
    quarter: int | None = None

    def as_tuple(self, granularity: str = "hourly") -> tuple:
        return tuple(getattr(self, name) for name in stamp_fields(granularity))


def parse_timestamp(text: str, row: int | None = None) -> datetime:
    try:
        return datetime.strptime(text.strip(), TIMESTAMP_FORMAT)
    except (ValueError, AttributeError):
        where = f" (row {row})" if row is not None else ""
        raise DataError(f"unparseable timestamp {text!r}{where}; expected YYYY-MM-DD HH:MM:SS") from None


def stamp_features(timestamp, granularity: str = "hourly", row: int | None = None) -> StampVector:
    fields = stamp_fields(granularity)
    if not isinstance(timestamp, datetime):
        timestamp = parse_timestamp(str(timestamp), row)
    return StampVector(
        month=timestamp.month - 1,
        day=timestamp.day - 1,
        weekday=timestamp.weekday(),
        hour=timestamp.hour,
        quarter=timestamp.minute // 15 if "quarter" in fields else None,
    )


def stamp_matrix(timestamps: np.ndarray, granularity: str = "hourly") -> np.ndarray:
    """Vectorised :func:`stamp_features` over a ``datetime64`` array -> ``(T, p)`` ints."""
    fields = stamp_fields(granularity)
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    days = ts.astype("datetime64[D]")
    months = ts.astype("datetime64[M]")
    columns = {
        "month": months.astype(np.int64) % 12,
        "day": (days - months.astype("datetime64[D]")).astype(np.int64),
        # 1970-01-01 was a Thursday (weekday 3 with Monday = 0)
        "weekday": (days.astype(np.int64) + 3) % 7,
        "hour": ((ts - days.astype("datetime64[s]")).astype(np.int64) // 3600),
        "quarter": ((ts - days.astype("datetime64[s]")).astype(np.int64) % 3600) // 900,
    }
    return np.stack([columns[name] for name in fields], axis=-1)


def positional_encoding(base_length: int, d_model: int, length: int | None = None, dtype=None) -> Tensor:
    """Fixed sinusoidal code with base ``2 * base_length``.

    Row ``pos``: ``sin(pos / (2 L)^(2j/d))`` on even columns and ``cos`` of the
    same on odd columns, ``j`` counted from zero. ``length`` defaults to
    ``base_length`` rows.
    """
    if base_length < 1:
        raise DimensionError("positional encoding needs a positive sequence length")
    if d_model < 2 or d_model % 2:
        raise DimensionError(f"positional encoding needs an even d_model, got {d_model}")
    length = base_length if length is None else length
    pos = np.arange(length, dtype=np.float64)[:, None]
    j = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / (2.0 * base_length) ** (2.0 * j / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe.astype(dtype or T.get_default_dtype()))


class StampTables(Module):
    """One learnable ``vocab x d_model`` table per stamp type."""

    def __init__(self, granularity: str, d_model: int, rng: Rng, dtype):
        self.tables = {
            name: Tensor(rng.uniform(-0.1, 0.1, (VOCAB[name], d_model)).astype(dtype), requires_grad=True)
            for name in stamp_fields(granularity)
        }
        self._granularity = granularity

    def __call__(self, stamps: np.ndarray) -> Tensor:
        stamps = np.asarray(stamps)
        if stamps.shape[-1] != len(self.tables):
            raise DimensionError(f"expected {len(self.tables)} stamp fields, got {stamps.shape[-1]}")
        total = None
        for column, (name, table) in enumerate(self.tables.items()):
            idx = stamps[..., column]
            if idx.min(initial=0) < 0 or idx.max(initial=0) >= VOCAB[name]:
                raise DataError(f"{name} stamp index out of range [0, {VOCAB[name]})")
            term = T.embedding(table, idx)
            total = term if total is None else T.add(total, term)
        return total


class EmbeddingParams(Module):
    """Width-3 projection of the raw values plus shared stamp tables."""

    def __init__(self, d_x: int, d_model: int, tables: StampTables, rng: Rng, dtype,
                 alpha: float = 1.0, base_length: int = 96):
        if not alpha > 0:
            raise ConfigError(f"alpha must be positive, got {alpha}")
        self.projection = Conv1d(d_x, d_model, rng, dtype, width=3, bias=False, padding="replicate")
        self.stamps = tables
        self._alpha = float(alpha)
        self._base_length = base_length
        self._d_model = d_model
        self._pe_cache: dict = {}

    @property
    def alpha(self) -> float:
        return self._alpha

    @alpha.setter
    def alpha(self, value: float) -> None:
        self._alpha = float(value)

    def positional(self, length: int, dtype) -> Tensor:
        key = (length, np.dtype(dtype).str)
        if key not in self._pe_cache:
            self._pe_cache[key] = positional_encoding(self._base_length, self._d_model, length, dtype)
        return self._pe_cache[key]


def embed_input(x, stamps: np.ndarray | Sequence[StampVector], params: EmbeddingParams,
                granularity: str | None = None) -> Tensor:
    """alpha * projection(x) + positional code + sum of stamp embeddings.

    Positions are local to the window (0-based).
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=params.projection.weight.dtype)
    if isinstance(stamps, (list, tuple)) and stamps and isinstance(stamps[0], StampVector):
        fields = tuple(params.stamps.tables)
        stamps = np.array([[getattr(s, f) for f in fields] for s in stamps])
    stamps = np.asarray(stamps)
    if stamps.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"{x.shape[-2]} input steps but stamps shaped {stamps.shape}")
    projected = params.projection(x)
    if params.alpha != 1.0:
        projected = T.mul(projected, params.alpha)
    pe = params.positional(x.shape[-2], x.dtype)
    return T.add(T.add(projected, pe), params.stamps(stamps))
