"""CSV ingestion, chronological splits, normalization, rolling windows and synthetic series."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import GRANULARITIES, TIMESTAMP_FORMAT, parse_timestamp, stamp_matrix
from .errors import ConfigError, ContractError, DataError

SPLITS = ("full", "train", "val", "test")


@dataclass(frozen=True)
class SeriesFrame:
    """Equispaced multichannel series; ``split`` tags where a slice came from."""

    timestamps: np.ndarray  # datetime64[s]
    values: np.ndarray  # (T, d_x)
    columns: tuple
    target_index: int = -1
    granularity: str = "hourly"
    split: str = "full"

    def __post_init__(self):
        if self.values.ndim != 2 or len(self.timestamps) != len(self.values):
            raise DataError(f"values {self.values.shape} do not match {len(self.timestamps)} timestamps")
        if len(self.columns) != self.values.shape[1]:
            raise DataError(f"{len(self.columns)} column names for {self.values.shape[1]} columns")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self):
        return len(self.values)

    @property
    def d_x(self) -> int:
        return self.values.shape[1]

    @property
    def target(self) -> str:
        return self.columns[self.target_index]

    def stamps(self) -> np.ndarray:
        return stamp_matrix(self.timestamps, self.granularity)

    def slice(self, start: int, stop: int, split: str) -> "SeriesFrame":
        return replace(self, timestamps=self.timestamps[start:stop], values=self.values[start:stop], split=split)

    def with_values(self, values: np.ndarray) -> "SeriesFrame":
        return replace(self, values=values)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.timestamps.astype("datetime64[s]").astype(np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.values, dtype=np.float64).tobytes())
        digest.update("|".join(self.columns).encode())
        return digest.hexdigest()[:16]


def _resolve_target(columns: Sequence[str], target) -> int:
    if target is None:
        return len(columns) - 1
    if isinstance(target, int):
        if not -len(columns) <= target < len(columns):
            raise ConfigError(f"target index {target} out of range for {len(columns)} columns")
        return target % len(columns)
    if target not in columns:
        raise ConfigError(f"target column {target!r} not among {list(columns)}")
    return list(columns).index(target)


def _check_spacing(timestamps: np.ndarray, granularity: str, first_row: int = 2) -> None:
    step = GRANULARITIES[granularity]
    diffs = np.diff(timestamps.astype(np.int64))
    problems = []
    for name, bad in (("duplicate timestamp", diffs == 0), ("timestamps out of order", diffs < 0),
                      ("gap in timestamps", diffs > step), ("off-grid timestamp", (diffs > 0) & (diffs < step))):
        rows = np.flatnonzero(bad) + 1 + first_row
        if rows.size:
            listed = ", ".join(str(r) for r in rows[:10]) + (" ..." if rows.size > 10 else "")
            problems.append(f"{name} at row(s) {listed}")
    if problems:
        raise DataError("; ".join(problems))


def load_csv(path, target=None, granularity: str = "hourly") -> SeriesFrame:
    """Read a ``date,col1,...`` CSV. Row numbers in errors count the header as row 1."""
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {sorted(GRANULARITIES)}, got {granularity!r}")
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: expected a header with a date column and at least one value column")
        if header[0].strip().lower() != "date":
            raise DataError(f"{path}: first column must be 'date', got {header[0]!r}")
        columns = tuple(h.strip() for h in header[1:])
        stamps, rows, missing = [], [], []
        for number, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise DataError(f"{path}: row {number} has {len(record)} fields, expected {len(header)}")
            stamps.append(parse_timestamp(record[0], number))
            row = []
            for cell in record[1:]:
                cell = cell.strip()
                try:
                    value = float(cell) if cell else math.nan
                except ValueError:
                    raise DataError(f"{path}: row {number}: non-numeric value {cell!r}") from None
                row.append(value)
            if any(math.isnan(v) for v in row):
                missing.append(number)
            rows.append(row)
    if missing:
        raise DataError(f"{path}: missing values at row(s) {', '.join(map(str, missing[:10]))}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    timestamps = np.array(stamps, dtype="datetime64[s]")
    _check_spacing(timestamps, granularity)
    return SeriesFrame(timestamps, np.array(rows, dtype=np.float64), columns,
                       _resolve_target(columns, target), granularity)


def write_csv(frame: SeriesFrame, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(("date",) + tuple(frame.columns))
        for ts, row in zip(frame.timestamps.astype("datetime64[s]").tolist(), frame.values):
            writer.writerow([ts.strftime(TIMESTAMP_FORMAT)] + [repr(float(v)) for v in row])


def _add_months(timestamp: np.datetime64, months: int) -> np.datetime64:
    first = timestamp.astype("datetime64[s]").item()
    year, month = divmod(first.month - 1 + months, 12)
    start = np.datetime64(f"{first.year + year:04d}-{month + 1:02d}", "M")
    days = int(((start + 1).astype("datetime64[D]") - start.astype("datetime64[D]")).astype(int))
    moved = first.replace(year=first.year + year, month=month + 1, day=min(first.day, days))
    return np.datetime64(moved, "s")


def split_chronological(frame: SeriesFrame, ratios: Sequence[float] | None = None,
                        months: Sequence[int] | None = None) -> tuple[SeriesFrame, SeriesFrame, SeriesFrame]:
    """Contiguous train/val/test partitions by ratios (floored) or calendar months."""
    if (ratios is None) == (months is None):
        raise ConfigError("give exactly one of ratios or months")
    n = len(frame)
    if ratios is not None:
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) > 1 + 1e-12:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to <= 1, got {ratios}")
        n_train = math.floor(ratios[0] * n + 1e-9)
        n_val = math.floor(ratios[1] * n + 1e-9)
        n_test = min(math.floor(ratios[2] * n + 1e-9), n - n_train - n_val)
        bounds = (n_train, n_train + n_val, n_train + n_val + n_test)
    else:
        if len(months) != 3 or any(m < 0 for m in months):
            raise ConfigError(f"split months must be three non-negative integers, got {months}")
        edges = [_add_months(frame.timestamps[0], int(c)) for c in np.cumsum(months)]
        step = np.timedelta64(GRANULARITIES[frame.granularity], "s")
        if edges[-1] > frame.timestamps[-1] + step:
            raise ConfigError(f"{sum(months)} months exceed the frame span")
        bounds = tuple(int(np.searchsorted(frame.timestamps, e, side="left")) for e in edges)
    return (frame.slice(0, bounds[0], "train"), frame.slice(bounds[0], bounds[1], "val"),
            frame.slice(bounds[1], bounds[2], "test"))


@dataclass(frozen=True)
class Normalizer:
    """Per-column zero-mean, unit-std scaling with statistics from the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame: SeriesFrame) -> "Normalizer":
        if frame.split != "train":
            raise ContractError(f"normalizer statistics must come from the train split, got {frame.split!r}")
        if len(frame) == 0:
            raise DataError("cannot fit a normalizer on an empty split")
        mean = frame.values.mean(axis=0)
        std = frame.values.std(axis=0)
        constant = [c for c, s in zip(frame.columns, std) if not s > 0]
        if constant:
            raise DataError(f"constant column(s) cannot be normalized: {', '.join(constant)}")
        return cls(mean, std)

    def apply(self, values: np.ndarray, channels=None) -> np.ndarray:
        mean, std = self._select(channels)
        return (values - mean) / std

    def inverse(self, values: np.ndarray, channels=None) -> np.ndarray:
        mean, std = self._select(channels)
        return values * std + mean

    def transform(self, frame: SeriesFrame) -> SeriesFrame:
        return frame.with_values(self.apply(frame.values))

    def _select(self, channels):
        if channels is None:
            return self.mean, self.std
        return self.mean[list(channels)], self.std[list(channels)]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, record: dict) -> "Normalizer":
        return cls(np.asarray(record["mean"], dtype=np.float64), np.asarray(record["std"], dtype=np.float64))


@dataclass(frozen=True)
class WindowSpec:
    seq_len: int
    label_len: int
    pred_len: int
    stride: int = 1

    def __post_init__(self):
        for name in ("seq_len", "pred_len", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.label_len <= self.seq_len:
            raise ConfigError(f"label_len must lie in [0, seq_len={self.seq_len}], got {self.label_len}")

    def count(self, length: int) -> int:
        span = length - self.seq_len - self.pred_len
        return 0 if span < 0 else span // self.stride + 1


@dataclass
class Batch:
    x_enc: np.ndarray  # (B, L_x, d_x)
    stamps_enc: np.ndarray  # (B, L_x, p)
    stamps_future: np.ndarray  # (B, L_y, p)
    y: np.ndarray  # (B, L_y, d_y)
    starts: np.ndarray
    timestamps_future: np.ndarray = field(default=None)


@dataclass(frozen=True)
class WindowSet:
    """Rolling windows over one split; window ``k`` starts at ``starts[k]``."""

    frame: SeriesFrame
    spec: WindowSpec
    starts: np.ndarray
    target_channels: tuple

    @property
    def split(self) -> str:
        return self.frame.split

    def __len__(self):
        return len(self.starts)

    def slices(self, k: int) -> tuple[slice, slice, slice]:
        s, spec = int(self.starts[k]), self.spec
        return (slice(s, s + spec.seq_len), slice(s + spec.seq_len - spec.label_len, s + spec.seq_len),
                slice(s + spec.seq_len, s + spec.seq_len + spec.pred_len))

    def batch(self, index=None) -> Batch:
        index = np.arange(len(self)) if index is None else np.asarray(index)
        starts = self.starts[index]
        enc = starts[:, None] + np.arange(self.spec.seq_len)
        fut = starts[:, None] + self.spec.seq_len + np.arange(self.spec.pred_len)
        stamps = self._stamps
        values = self.frame.values
        return Batch(values[enc], stamps[enc], stamps[fut], values[fut][..., list(self.target_channels)],
                     starts, self.frame.timestamps[fut])

    @property
    def _stamps(self) -> np.ndarray:
        cached = self.__dict__.get("_stamp_cache")
        if cached is None:
            cached = self.frame.stamps()
            object.__setattr__(self, "_stamp_cache", cached)
        return cached


def make_windows(frame: SeriesFrame, spec: WindowSpec, features: str = "M") -> WindowSet:
    """All windows lying inside ``frame``; never crosses the split it came from."""
    if len(frame) < spec.seq_len + spec.pred_len:
        raise DataError(f"{frame.split} split has {len(frame)} steps, needs at least "
                        f"seq_len + pred_len = {spec.seq_len + spec.pred_len}")
    if features not in ("S", "M"):
        raise ConfigError(f"features must be S or M, got {features!r}")
    starts = np.arange(spec.count(len(frame))) * spec.stride
    channels = (frame.target_index % frame.d_x,) if features == "S" else tuple(range(frame.d_x))
    return WindowSet(frame, spec, starts, channels)


def synth_series(kind: str = "multisine", length: int = 2000, d_x: int = 1, seed: int = 0,
                 start: str = "2016-07-01 00:00:00", granularity: str = "hourly") -> SeriesFrame:
    """Deterministic synthetic series; the last column is named ``OT`` and is the target.

    ``multisine``: per column, three unit-amplitude sinusoids with incommensurate
    periods and seeded phases. ``trend+noise``: a seeded linear trend plus
    Gaussian noise.
    """
    if length < 1 or d_x < 1:
        raise ConfigError("synthetic series needs length >= 1 and d_x >= 1")
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {sorted(GRANULARITIES)}, got {granularity!r}")
    gen = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)[:, None]
    if kind == "multisine":
        # periods scaled by irrational ratios so no two share a common period
        periods = np.array([24.0, 24.0 * math.sqrt(2.0), 24.0 * math.pi])
        scale = 1.0 + 0.25 * np.arange(d_x)[:, None] / max(d_x, 1)
        phases = gen.uniform(0.0, 2.0 * math.pi, (d_x, 3))
        angles = 2.0 * math.pi * t[:, :, None] / (periods[None, None, :] * scale[None, :, :]) + phases[None]
        values = np.sin(angles).sum(axis=-1)
    elif kind == "trend+noise":
        slopes = gen.uniform(-1.0, 1.0, d_x) / length
        values = t * slopes[None, :] + gen.standard_normal((length, d_x))
    else:
        raise ConfigError(f"synthetic kind must be multisine or trend+noise, got {kind!r}")
    step = np.timedelta64(GRANULARITIES[granularity], "s")
    timestamps = np.datetime64(start.replace(" ", "T"), "s") + step * np.arange(length)
    columns = tuple(f"x{i}" for i in range(d_x - 1)) + ("OT",)
    return SeriesFrame(timestamps, values, columns, d_x - 1, granularity)


def read_frame(path, target=None, granularity: str = "hourly") -> SeriesFrame:
    if not Path(path).exists():
        raise DataError(f"data file {path} does not exist")
    return load_csv(path, target, granularity)


@dataclass(frozen=True)
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer


def prepare_splits(frame: SeriesFrame, spec: WindowSpec, features: str = "M",
                   ratios: Sequence[float] | None = (0.7, 0.1, 0.2),
                   months: Sequence[int] | None = None) -> PreparedData:
    """Split chronologically, normalize with train statistics, then window each split."""
    parts = split_chronological(frame, None if months else ratios, months)
    normalizer = Normalizer.fit(parts[0])
    train, val, test = (make_windows(normalizer.transform(p), spec, features) for p in parts)
    return PreparedData(train, val, test, normalizer)
