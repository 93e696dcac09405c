"""
Dataset loading, chronological splits, channel-independent windows,
instance/RevIN normalization and client partitioning.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DegenerateError, EmptyWindowError, FormatError, ParseError
from .numerics import Tensor, div, mul, add, sub, reshape, take

NORM_EPS = 1e-5
GAIN_FLOOR = 1e-8


@dataclass(frozen=True)
class TimeSeriesDataset:
    values: np.ndarray  # (rows, channels)
    channels: tuple[str, ...]
    granularity_minutes: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.values.ndim != 2:
            raise FormatError(f"values must be 2-D (rows x channels), got shape {self.values.shape}")
        if self.values.shape[1] != len(self.channels):
            raise FormatError(f"{self.values.shape[1]} value columns but {len(self.channels)} channel names")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("dataset contains missing or non-finite values")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "TimeSeriesDataset":
        return TimeSeriesDataset(self.values[start:stop], self.channels, self.granularity_minutes, self.name)

    def with_values(self, values: np.ndarray) -> "TimeSeriesDataset":
        return TimeSeriesDataset(values, self.channels, self.granularity_minutes, self.name)


def _parse_time(text: str):
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return None


def load_csv(path, name: str | None = None) -> TimeSeriesDataset:
    """Read a CSV whose first column is a timestamp and the rest are numeric channels."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise FormatError(f"{path}: need a timestamp column and at least one value column, got {len(header)} column(s)")
        channels = tuple(h.strip() for h in header[1:])
        stamps, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}", row=line_no)
            values = []
            for col, cell in zip(channels, row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"{path}: row {line_no}, column {col!r}: not a number: {cell!r}", line_no, col) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {line_no}, column {col!r}: missing value {cell!r}", line_no, col)
                values.append(v)
            stamps.append(row[0])
            rows.append(values)
    if not rows:
        raise FormatError(f"{path}: no data rows")

    granularity = None
    parsed = [_parse_time(s) for s in stamps]
    if all(p is not None for p in parsed) and len({type(p) for p in parsed}) == 1:
        for i in range(1, len(parsed)):
            if not parsed[i] > parsed[i - 1]:
                raise FormatError(f"{path}: timestamps not strictly increasing at row {i + 2}")
        if isinstance(parsed[0], datetime) and len(parsed) > 1:
            deltas = [(b - a).total_seconds() / 60.0 for a, b in zip(parsed[:-1], parsed[1:])]
            granularity = float(np.median(deltas))
    return TimeSeriesDataset(np.asarray(rows, dtype=np.float64), channels, granularity, name or path.stem)


def write_csv(ds: TimeSeriesDataset, path, start: datetime = datetime(2016, 7, 1)) -> None:
    step = timedelta(minutes=ds.granularity_minutes or 60.0)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *ds.channels])
        for i, row in enumerate(ds.values):
            w.writerow([(start + i * step).strftime("%Y-%m-%d %H:%M:%S"), *(repr(float(v)) for v in row)])


def split_train_test(ds: TimeSeriesDataset, ratio: float = 0.8, window: int = 1) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Chronological split: the first floor(ratio * rows) rows train, the rest test."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}", key="data.split_ratio")
    n_train = int(math.floor(ratio * ds.n_rows + 1e-9))
    n_test = ds.n_rows - n_train
    if n_train < window or n_test < window:
        raise ConfigError(
            f"split {n_train}/{n_test} leaves a side shorter than the window length {window}",
            key="data.split_ratio",
        )
    return ds.rows(0, n_train), ds.rows(n_train, ds.n_rows)


@dataclass(frozen=True)
class Standardizer:
    """Per-channel z-scoring fitted on training rows only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, ds: TimeSeriesDataset) -> TimeSeriesDataset:
        return ds.with_values((ds.values - self.mean) / self.std)


# -----------------------------------------------------------------------------
# Windows
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray  # (L,)
    target: np.ndarray  # (T,)
    channel: int
    origin: int


@dataclass(frozen=True)
class WindowSet:
    """Every (origin, channel) window over a series, materialized lazily per batch."""

    series: np.ndarray  # (rows, channels)
    lookback: int
    horizon: int
    origins: np.ndarray
    channels: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        o = self.origins[index]
        c = self.channels[index]
        span = np.arange(self.lookback + self.horizon)
        block = self.series[o[:, None] + span, c[:, None]]
        return block[:, : self.lookback], block[:, self.lookback :], c

    def all(self):
        return self.batch(np.arange(len(self)))

    def sample(self, i: int) -> WindowSample:
        x, y, c = self.batch(np.array([i]))
        return WindowSample(x[0], y[0], int(c[0]), int(self.origins[i]))

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self.sample(i)


def window_origins(n_rows: int, lookback: int, horizon: int, stride: int = 1) -> np.ndarray:
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ConfigError(f"need lookback, horizon, stride >= 1 (got {lookback}, {horizon}, {stride})")
    if n_rows < lookback + horizon:
        raise EmptyWindowError(f"{n_rows} rows cannot host a window of {lookback}+{horizon}")
    count = (n_rows - lookback - horizon) // stride + 1
    return np.arange(count, dtype=np.intp) * stride


def make_windows(ds, lookback: int, horizon: int, stride: int = 1) -> WindowSet:
    """One sample per channel per valid origin; origins advance by ``stride``."""
    values = ds.values if isinstance(ds, TimeSeriesDataset) else np.asarray(ds)
    starts = window_origins(values.shape[0], lookback, horizon, stride)
    m = values.shape[1]
    return WindowSet(
        series=values,
        lookback=lookback,
        horizon=horizon,
        origins=np.repeat(starts, m),
        channels=np.tile(np.arange(m, dtype=np.intp), len(starts)),
    )


# -----------------------------------------------------------------------------
# Normalization
# -----------------------------------------------------------------------------


def instance_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and floored population std along the last axis (kept as trailing dim)."""
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True))
    return mu, np.maximum(sd, NORM_EPS)


def instance_normalize(x: np.ndarray):
    """Returns (x_norm, mean, std) with std floored at 1e-5."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.shape[-1] < 2:
        raise ConfigError("instance normalization needs at least 2 time steps")
    mu, sd = instance_stats(x)
    return (x - mu) / sd, mu, sd


@dataclass
class RevinState:
    mean: np.ndarray  # (B, 1)
    std: np.ndarray  # (B, 1)
    gain: Tensor
    bias: Tensor
    channels: np.ndarray | None = None

    def affine(self) -> tuple[Tensor, Tensor]:
        if self.channels is None:
            return self.gain, self.bias
        n = len(self.channels)
        return (
            reshape(take(self.gain, self.channels), (n, 1)),
            reshape(take(self.bias, self.channels), (n, 1)),
        )


def revin_normalize(x: np.ndarray, gain: Tensor, bias: Tensor, channels=None) -> tuple[Tensor, RevinState]:
    """gain * (x - mean) / std + bias, with per-window statistics kept for the inverse.

    ``gain``/``bias`` are per-channel vectors indexed by ``channels`` (one entry per
    row of ``x``), or broadcastable scalars when ``channels`` is None.
    """
    x = np.asarray(x)
    mu, sd = instance_stats(x)
    state = RevinState(mu, sd, gain, bias, None if channels is None else np.asarray(channels, dtype=np.intp))
    g, b = state.affine()
    centered = Tensor((x - mu) / sd, dtype=x.dtype)
    return add(mul(centered, g), b), state


def revin_denormalize(y: Tensor, state: RevinState) -> Tensor:
    """(y - bias) / gain * std + mean."""
    if np.any(np.abs(state.gain.data) < GAIN_FLOOR):
        raise DegenerateError(f"RevIN gain magnitude below {GAIN_FLOOR}; cannot denormalize")
    g, b = state.affine()
    out = mul(div(sub(y, b), g), state.std.astype(y.dtype))
    return add(out, state.mean.astype(y.dtype))


# -----------------------------------------------------------------------------
# Clients
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    start: int
    stop: int
    values: np.ndarray = field(repr=False)

    @property
    def n_rows(self) -> int:
        return self.stop - self.start


def partition_clients(train, n_clients: int, window: int = 1) -> list[ClientShard]:
    """Contiguous, disjoint, covering shards whose sizes differ by at most one row."""
    values = train.values if isinstance(train, TimeSeriesDataset) else np.asarray(train)
    if n_clients < 1:
        raise ConfigError(f"need at least one client, got {n_clients}", key="federation.clients")
    rows = values.shape[0]
    base, extra = divmod(rows, n_clients)
    if base < window:
        raise ConfigError(
            f"{rows} training rows over {n_clients} clients gives shards of {base} rows, "
            f"shorter than the window {window}",
            key="federation.clients",
        )
    shards, start = [], 0
    for cid in range(n_clients):
        size = base + (1 if cid < extra else 0)
        shards.append(ClientShard(cid, start, start + size, values[start : start + size]))
        start += size
    return shards


def series_features(values: np.ndarray) -> np.ndarray:
    """(mean, std, least-squares slope per step, row count), averaged over channels.

    ``values`` is (rows, channels) or (rows,).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    n = v.shape[0]
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    denom = float(tc @ tc)
    slope = (tc @ (v - v.mean(axis=0))) / denom if denom > 0 else np.zeros(v.shape[1])
    return np.array([v.mean(), v.std(axis=0).mean(), float(np.mean(slope)), float(n)])


def client_features(shard: ClientShard) -> np.ndarray:
    if shard.n_rows == 0:
        raise ConfigError("client shard is empty")
    return series_features(shard.values)


@dataclass(frozen=True)
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureScaler":
        f = np.asarray(features, dtype=np.float64)
        return cls(f.mean(axis=0), f.std(axis=0))

    def transform(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (f - self.mean) / safe, 0.0)


def window_features(blocks: np.ndarray, count: float) -> np.ndarray:
    """Client-style features for look-back blocks: (B, L, M) -> (B, 4).

    Same statistics as :func:`series_features`, with the row count replaced by
    ``count`` so that windows and clients live in one feature space.
    """
    x = np.asarray(blocks, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    n = x.shape[1]
    tc = np.arange(n) - (n - 1) / 2.0
    denom = float(tc @ tc)
    centred = x - x.mean(axis=1, keepdims=True)
    slope = np.einsum("blm,l->bm", centred, tc) / denom if denom > 0 else np.zeros(x.shape[::2])
    return np.column_stack([
        x.mean(axis=(1, 2)), x.std(axis=1).mean(axis=1), slope.mean(axis=1), np.full(len(x), float(count)),
    ])


# -----------------------------------------------------------------------------
# Synthetic series
# -----------------------------------------------------------------------------


def _stamp_free(values: np.ndarray, names: Sequence[str], name: str, minutes: float = 60.0) -> TimeSeriesDataset:
    return TimeSeriesDataset(np.asarray(values, dtype=np.float64), tuple(names), minutes, name)


def sine_dataset(rows: int, channels: int = 2, period: float = 24.0, noise: float = 0.05, seed: int = 0) -> TimeSeriesDataset:
    rng = np.random.default_rng(seed)
    t = np.arange(rows)[:, None]
    phase = np.linspace(0.0, np.pi, channels, endpoint=False)[None, :]
    amp = 1.0 + 0.5 * np.arange(channels)[None, :]
    values = amp * np.sin(2 * np.pi * t / period + phase) + noise * rng.standard_normal((rows, channels))
    return _stamp_free(values, [f"ch{i}" for i in range(channels)], "sine")


def constant_dataset(rows: int, channels: int = 1, value: float = 5.0) -> TimeSeriesDataset:
    return _stamp_free(np.full((rows, channels), value), [f"ch{i}" for i in range(channels)], "constant")


@dataclass(frozen=True)
class Regime:
    level: float
    ar: float
    noise: float
    period: float
    amplitude: float


REGIME_A = Regime(level=2.0, ar=0.8, noise=0.4, period=24.0, amplitude=1.0)
REGIME_B = Regime(level=-2.0, ar=-0.5, noise=0.6, period=12.0, amplitude=0.5)


def ar_seasonal(rows: int, regime: Regime, rng: np.random.Generator) -> np.ndarray:
    e = np.zeros(rows)
    shocks = regime.noise * rng.standard_normal(rows)
    for i in range(1, rows):
        e[i] = regime.ar * e[i - 1] + shocks[i]
    t = np.arange(rows)
    return regime.level + regime.amplitude * np.sin(2 * np.pi * t / regime.period) + e


def two_regime_dataset(rows: int = 2000, ratio: float = 0.8, seed: int = 0,
                       regimes: tuple[Regime, Regime] = (REGIME_A, REGIME_B)) -> TimeSeriesDataset:
    """Single-channel series laid out as [A | B] in the training span and [A | B] in the test span.

    Contiguous client shards over the training span therefore split into two
    disjoint halves, one per generator, and the test span covers both.
    """
    rng = np.random.default_rng(seed)
    n_train = int(math.floor(ratio * rows + 1e-9))
    n_test = rows - n_train
    parts = []
    for span in (n_train, n_test):
        half = span // 2
        parts.append(ar_seasonal(half, regimes[0], rng))
        parts.append(ar_seasonal(span - half, regimes[1], rng))
    return _stamp_free(np.concatenate(parts)[:, None], ["value"], "two_regime")


BUNDLED = "synthetic_200.csv"


def bundled_dataset() -> TimeSeriesDataset:
    """The 200-row, 2-channel hourly series shipped with the package."""
    from importlib.resources import as_file, files

    with as_file(files("fedpatch") / "resources" / BUNDLED) as path:
        return load_csv(path, name="synthetic_200")


def make_bundled(seed: int = 7) -> TimeSeriesDataset:
    """Regenerate the bundled series: daily seasonality, a slow drift and noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(200)[:, None]
    level = np.array([[10.0, 4.0]])
    amp = np.array([[3.0, 1.5]])
    phase = np.array([[0.0, 1.3]])
    values = level + amp * np.sin(2 * np.pi * t / 24 + phase) + 0.01 * t + 0.3 * rng.standard_normal((200, 2))
    return _stamp_free(np.round(values, 4), ["load", "temp"], "synthetic_200")


def ett_like_dataset(rows: int = 17420, channels: int = 7, seed: int = 0) -> TimeSeriesDataset:
    """Hourly stand-in with ETT-style structure: daily and weekly cycles, AR(1) noise, slow level drift.

    Used where the real benchmark file is not available; it matches the
    shape, not the statistics, of the transformer-load data.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(rows)[:, None]
    daily = rng.uniform(0.5, 2.0, channels) * np.sin(2 * np.pi * t / 24 + rng.uniform(0, 2 * np.pi, channels))
    weekly = rng.uniform(0.2, 1.0, channels) * np.sin(2 * np.pi * t / 168 + rng.uniform(0, 2 * np.pi, channels))
    drift = np.cumsum(0.02 * rng.standard_normal((rows, channels)), axis=0)
    noise = np.zeros((rows, channels))
    shocks = 0.3 * rng.standard_normal((rows, channels))
    for i in range(1, rows):
        noise[i] = 0.7 * noise[i - 1] + shocks[i]
    values = rng.uniform(-5, 15, channels) + daily + weekly + drift + noise
    return _stamp_free(values, ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"][:channels] if channels <= 7
                       else [f"ch{i}" for i in range(channels)], "ett_like")
