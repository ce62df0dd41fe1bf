"""Series containers, benchmark datasets, CSV ingestion, preprocessing and segmentation."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

MINUTES_PER_DAY = 390
MINUTES_PER_BIN = 10
N_TIME_BINS = MINUTES_PER_DAY // MINUTES_PER_BIN  # 39 bins: 0..38
MARKET_OPEN = time(9, 30)
MARKET_CLOSE = time(16, 0)


class SpecificationError(ValueError):
    """Invalid dataset specification or configuration."""


class IngestionError(ValueError):
    """Malformed market-data file; the message names the offending row."""


class PreprocessError(ValueError):
    pass


class ChannelKind(str, enum.Enum):
    PRICE = "price"
    VOLUME = "volume"
    RAW = "raw"


@dataclass(frozen=True)
class ChannelMeta:
    ticker: str
    kind: ChannelKind = ChannelKind.RAW

    @property
    def column(self) -> str:
        if self.kind is ChannelKind.PRICE:
            return f"{self.ticker}_mid"
        if self.kind is ChannelKind.VOLUME:
            return f"{self.ticker}_vol"
        return self.ticker


@dataclass
class MultivariateSeries:
    """A ``T x C`` matrix with per-channel metadata and optional minute timestamps.

    Stock layouts interleave channels as ``[t1_mid, t1_vol, t2_mid, t2_vol, ...]``.
    """

    values: np.ndarray
    channel_meta: list[ChannelMeta]
    timestamps: list[datetime] | None = None
    minute_offset: int = 0  # minute-of-day of row 0 when no timestamps are attached

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D (T x C), got shape {self.values.shape}")
        T, C = self.values.shape
        if T < 1:
            raise ValueError("series must have at least one row")
        if len(self.channel_meta) != C:
            raise ValueError(f"{len(self.channel_meta)} channel records for {C} channels")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.argwhere(~np.isfinite(self.values))[0, 0])
            raise ValueError(f"non-finite value at row {bad}")
        kinds = {m.kind for m in self.channel_meta}
        if kinds & {ChannelKind.PRICE, ChannelKind.VOLUME} and C % 2:
            raise ValueError("price/volume layouts need an even channel count")
        if self.timestamps is not None:
            if len(self.timestamps) != T:
                raise ValueError("timestamps length differs from row count")
            for i in range(1, T):
                if self.timestamps[i] <= self.timestamps[i - 1]:
                    raise ValueError(f"timestamps not strictly increasing at row {i}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def columns(self) -> list[str]:
        return [m.column for m in self.channel_meta]

    def channels_of(self, kind: ChannelKind) -> list[int]:
        return [i for i, m in enumerate(self.channel_meta) if m.kind is kind]

    def minute_of_day(self) -> np.ndarray:
        """Minutes since market open for every row, in ``[0, 389]``."""
        if self.timestamps is None:
            return (np.arange(self.T) + self.minute_offset) % MINUTES_PER_DAY
        opens = [datetime.combine(ts.date(), MARKET_OPEN) for ts in self.timestamps]
        return np.array(
            [int((ts - o).total_seconds() // 60) for ts, o in zip(self.timestamps, opens)]
        )

    def slice_rows(self, start: int, stop: int) -> "MultivariateSeries":
        ts = self.timestamps[start:stop] if self.timestamps is not None else None
        return MultivariateSeries(
            self.values[start:stop].copy(),
            list(self.channel_meta),
            ts,
            minute_offset=(self.minute_offset + start) % MINUTES_PER_DAY,
        )


def time_bins(minutes: np.ndarray) -> np.ndarray:
    """Discretise minutes-since-open into 10-minute bins (0..38)."""
    minutes = np.asarray(minutes)
    return np.clip(minutes // MINUTES_PER_BIN, 0, N_TIME_BINS - 1).astype(np.int64)


def stock_layout(tickers: Sequence[str]) -> list[ChannelMeta]:
    meta = []
    for t in tickers:
        meta.append(ChannelMeta(t, ChannelKind.PRICE))
        meta.append(ChannelMeta(t, ChannelKind.VOLUME))
    return meta


def raw_layout(n: int, prefix: str = "ch") -> list[ChannelMeta]:
    return [ChannelMeta(f"{prefix}{i}", ChannelKind.RAW) for i in range(n)]


@dataclass(frozen=True)
class SegmentPair:
    past: np.ndarray
    future: np.ndarray
    t_origin: int
    minute_of_day: np.ndarray

    def __post_init__(self) -> None:
        if self.past.shape[0] < 1 or self.future.shape[0] < 2:
            raise ValueError("need P >= 1 and F >= 2")
        if len(self.minute_of_day) != self.past.shape[0] + self.future.shape[0]:
            raise ValueError("minute_of_day must cover P + F steps")


def segment(series: MultivariateSeries, P: int, F: int) -> list[SegmentPair]:
    """Cut every (past, future) pair with split index ``t`` in ``[P, T - F]``.

    ``past`` holds rows ``[t - P, t)`` and ``future`` rows ``[t, t + F)``.
    """
    if P < 1 or F < 2:
        raise ValueError(f"need P >= 1 and F >= 2, got P={P}, F={F}")
    T = series.T
    if T < P + F:
        raise ValueError(f"series of length {T} too short for P={P}, F={F}")
    minutes = series.minute_of_day()
    v = series.values
    return [
        SegmentPair(v[t - P : t], v[t : t + F], t, minutes[t - P : t + F])
        for t in range(P, T - F + 1)
    ]


# --------------------------------------------------------------------------- synthetic


@dataclass
class SyntheticDatasetSpec:
    kind: str  # "sines" | "gaussian_ar"
    channels: int = 5
    length: int = 1000
    seed: int = 0
    frequencies: Sequence[float] | None = None
    phases: Sequence[float] | None = None
    phi: float = 0.8
    sigma: float = 0.8

    def validate(self) -> None:
        if self.kind not in ("sines", "gaussian_ar"):
            raise SpecificationError(f"unknown synthetic kind {self.kind!r}")
        if self.channels < 1:
            raise SpecificationError(f"channel count must be >= 1, got {self.channels}")
        if self.length < 1:
            raise SpecificationError(f"length must be >= 1, got {self.length}")
        if self.kind == "sines":
            for name, vals, lo, hi in (
                ("frequencies", self.frequencies, 0.0, 1.0),
                ("phases", self.phases, -math.pi, math.pi),
            ):
                if vals is None:
                    continue
                if len(vals) != self.channels:
                    raise SpecificationError(f"{name} needs {self.channels} entries")
                if any(not (lo <= x <= hi) for x in vals):
                    raise SpecificationError(f"{name} must lie in [{lo}, {hi}]")
        else:
            if not 0.0 <= self.phi <= 1.0:
                raise SpecificationError(f"phi must lie in [0, 1], got {self.phi}")
            if not -1.0 <= self.sigma <= 1.0:
                raise SpecificationError(f"sigma must lie in [-1, 1], got {self.sigma}")
            if self.channels > 1 and self.sigma < -1.0 / (self.channels - 1):
                raise SpecificationError(
                    f"sigma={self.sigma} makes the noise covariance non-positive-semidefinite "
                    f"(PSD requires sigma >= {-1.0 / (self.channels - 1):.4f} for "
                    f"{self.channels} channels)"
                )


def generate_sines(spec: SyntheticDatasetSpec) -> MultivariateSeries:
    """Channel ``i`` is ``sin(2 pi eta_i t + theta_i)`` at ``t = 0..T-1``."""
    spec.validate()
    if spec.kind != "sines":
        raise SpecificationError("generate_sines needs kind='sines'")
    rng = np.random.default_rng(spec.seed)
    eta = rng.uniform(0.0, 1.0, spec.channels)
    theta = rng.uniform(-math.pi, math.pi, spec.channels)
    if spec.frequencies is not None:
        eta = np.asarray(spec.frequencies, dtype=np.float64)
    if spec.phases is not None:
        theta = np.asarray(spec.phases, dtype=np.float64)
    t = np.arange(spec.length, dtype=np.float64)[:, None]
    values = np.sin(2.0 * np.pi * eta[None, :] * t + theta[None, :])
    return MultivariateSeries(values, raw_layout(spec.channels))


def gaussian_noise_cov(channels: int, sigma: float) -> np.ndarray:
    return (1.0 - sigma) * np.eye(channels) + sigma * np.ones((channels, channels))


def generate_gaussian_ar(spec: SyntheticDatasetSpec) -> MultivariateSeries:
    """AR(1) with exchangeable noise: ``g(t) = phi g(t-1) + q(t)``, ``g(0) = q(0)``."""
    spec.validate()
    if spec.kind != "gaussian_ar":
        raise SpecificationError("generate_gaussian_ar needs kind='gaussian_ar'")
    rng = np.random.default_rng(spec.seed)
    cov = gaussian_noise_cov(spec.channels, spec.sigma)
    q = rng.multivariate_normal(np.zeros(spec.channels), cov, size=spec.length, method="eigh")
    g = np.empty_like(q)
    g[0] = q[0]
    for t in range(1, spec.length):
        g[t] = spec.phi * g[t - 1] + q[t]
    return MultivariateSeries(g, raw_layout(spec.channels))


def generate(spec: SyntheticDatasetSpec) -> MultivariateSeries:
    if spec.kind == "sines":
        return generate_sines(spec)
    return generate_gaussian_ar(spec)


# --------------------------------------------------------------------------- CSV


def _parse_header(header: list[str]) -> tuple[list[ChannelMeta], bool]:
    if not header or header[0] not in ("timestamp", "step"):
        raise IngestionError("row 1: first column must be 'timestamp' (or 'step' for raw data)")
    meta = []
    for col in header[1:]:
        if col.endswith("_mid"):
            meta.append(ChannelMeta(col[:-4], ChannelKind.PRICE))
        elif col.endswith("_vol"):
            meta.append(ChannelMeta(col[:-4], ChannelKind.VOLUME))
        else:
            meta.append(ChannelMeta(col, ChannelKind.RAW))
    return meta, header[0] == "timestamp"


def _check_trading_minute(ts: datetime, row: int) -> None:
    if ts.second or ts.microsecond:
        raise IngestionError(f"row {row}: timestamp {ts.isoformat()} is not minute-aligned")
    if not (MARKET_OPEN <= ts.time() < MARKET_CLOSE):
        raise IngestionError(f"row {row}: timestamp {ts.isoformat()} outside 09:30-16:00")


def read_series_csv(path: str | Path) -> MultivariateSeries:
    """Load any CSV written by :func:`write_series_csv` (stock or raw layout)."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError("row 1: empty file") from None
        meta, has_ts = _parse_header(header)
        stock = any(m.kind is not ChannelKind.RAW for m in meta)
        rows: list[list[float]] = []
        stamps: list[datetime] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise IngestionError(f"row {lineno}: expected {len(header)} fields, got {len(rec)}")
            if has_ts:
                try:
                    ts = datetime.fromisoformat(rec[0])
                except ValueError:
                    raise IngestionError(f"row {lineno}: bad timestamp {rec[0]!r}") from None
                if stock:
                    _check_trading_minute(ts, lineno)
                if stamps:
                    prev = stamps[-1]
                    if ts <= prev:
                        raise IngestionError(f"row {lineno}: non-monotonic timestamp {rec[0]}")
                    if stock and ts.date() == prev.date() and ts - prev != timedelta(minutes=1):
                        raise IngestionError(f"row {lineno}: gap within trading day after {prev}")
                stamps.append(ts)
            try:
                vals = [float(x) for x in rec[1:]]
            except ValueError:
                raise IngestionError(f"row {lineno}: non-numeric value") from None
            for m, x in zip(meta, vals):
                if not math.isfinite(x):
                    raise IngestionError(f"row {lineno}: non-finite value in {m.column}")
                if m.kind is ChannelKind.PRICE and x <= 0:
                    raise IngestionError(f"row {lineno}: non-positive mid-price in {m.column}")
                if m.kind is ChannelKind.VOLUME and x < 0:
                    raise IngestionError(f"row {lineno}: negative volume in {m.column}")
            rows.append(vals)
    if not rows:
        raise IngestionError("file has no data rows")
    return MultivariateSeries(np.array(rows), meta, stamps if has_ts else None)


def ingest_csv(path: str | Path, expected_tickers: Sequence[str]) -> MultivariateSeries:
    """Read a minute-bar mid/volume file and check its column layout."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    want = ["timestamp"] + [c.column for c in stock_layout(expected_tickers)]
    missing = [c for c in want if c not in header]
    if missing:
        raise IngestionError(f"row 1: missing column(s) {', '.join(missing)}")
    if header != want:
        raise IngestionError(f"row 1: columns {header} do not match expected order {want}")
    return read_series_csv(path)


def write_series_csv(series: MultivariateSeries, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        first = "timestamp" if series.timestamps is not None else "step"
        w.writerow([first] + series.columns)
        for i, row in enumerate(series.values):
            key = series.timestamps[i].isoformat(timespec="minutes") if series.timestamps else i
            w.writerow([key] + [repr(float(x)) for x in row])
    tmp.replace(path)


def trading_timestamps(start_day: datetime, n_rows: int, minute_offset: int = 0) -> list[datetime]:
    """Consecutive weekday trading minutes starting ``minute_offset`` minutes after the open."""
    out = []
    day = start_day.date()
    k = minute_offset
    while len(out) < n_rows:
        while day.weekday() >= 5:
            day += timedelta(days=1)
        base = datetime.combine(day, MARKET_OPEN)
        while k < MINUTES_PER_DAY and len(out) < n_rows:
            out.append(base + timedelta(minutes=k))
            k += 1
        k = 0
        day += timedelta(days=1)
    return out


# --------------------------------------------------------------------------- preprocessing


@dataclass
class PreprocessState:
    """Per-channel statistics needed to map model space back to prices and volumes."""

    channel_meta: list[ChannelMeta]
    ret_mean: dict[int, float] = field(default_factory=dict)
    ret_std: dict[int, float] = field(default_factory=dict)
    first_price: dict[int, float] = field(default_factory=dict)
    last_price: dict[int, float] = field(default_factory=dict)
    vol_min: dict[int, float] = field(default_factory=dict)
    vol_max: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "channels": [[m.ticker, m.kind.value] for m in self.channel_meta],
            **{
                k: {str(i): v for i, v in getattr(self, k).items()}
                for k in ("ret_mean", "ret_std", "first_price", "last_price", "vol_min", "vol_max")
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PreprocessState":
        meta = [ChannelMeta(t, ChannelKind(k)) for t, k in doc["channels"]]
        kw = {
            k: {int(i): float(v) for i, v in doc[k].items()}
            for k in ("ret_mean", "ret_std", "first_price", "last_price", "vol_min", "vol_max")
        }
        return cls(meta, **kw)


def fit_preprocess(series: MultivariateSeries) -> PreprocessState:
    if series.T < 2:
        raise PreprocessError("need at least two rows to compute returns")
    state = PreprocessState(list(series.channel_meta))
    for i, m in enumerate(series.channel_meta):
        col = series.values[:, i]
        if m.kind is ChannelKind.PRICE:
            if np.any(col <= 0):
                raise PreprocessError(f"channel {m.column}: prices must be positive")
            r = np.diff(np.log(col))
            std = float(r.std())
            if not std > 0:
                raise PreprocessError(f"channel {m.column}: constant price, log-return std is 0")
            state.ret_mean[i] = float(r.mean())
            state.ret_std[i] = std
            state.first_price[i] = float(col[0])
            state.last_price[i] = float(col[-1])
        elif m.kind is ChannelKind.VOLUME:
            lo, hi = float(col.min()), float(col.max())
            if not hi > lo:
                raise PreprocessError(f"channel {m.column}: constant volume, cannot min-max scale")
            state.vol_min[i] = lo
            state.vol_max[i] = hi
    return state


def scale_volume(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return 2.0 * (np.asarray(v, dtype=np.float64) - lo) / (hi - lo) - 1.0


def unscale_volume(s: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.maximum(lo + (np.asarray(s, dtype=np.float64) + 1.0) * 0.5 * (hi - lo), 0.0)


def apply_preprocess(series: MultivariateSeries, state: PreprocessState) -> MultivariateSeries:
    """Z-scored log-returns for prices, [-1, 1] min-max for volumes; drops row 0."""
    if series.T < 2:
        raise PreprocessError("need at least two rows to compute returns")
    if len(state.channel_meta) != series.C:
        raise PreprocessError("state and series channel counts differ")
    out = np.empty((series.T - 1, series.C))
    for i, m in enumerate(series.channel_meta):
        col = series.values[:, i]
        if m.kind is ChannelKind.PRICE:
            r = np.diff(np.log(col))
            out[:, i] = (r - state.ret_mean[i]) / state.ret_std[i]
        elif m.kind is ChannelKind.VOLUME:
            out[:, i] = scale_volume(col[1:], state.vol_min[i], state.vol_max[i])
        else:
            out[:, i] = col[1:]
    ts = series.timestamps[1:] if series.timestamps is not None else None
    return MultivariateSeries(out, list(series.channel_meta), ts, (series.minute_offset + 1) % MINUTES_PER_DAY)


def invert_preprocess(
    series: MultivariateSeries,
    state: PreprocessState,
    initial_prices: dict[int, float] | None = None,
) -> MultivariateSeries:
    """Map model-space rows back to prices and volumes.

    Prices are rebuilt by cumulative exponentiation from ``initial_prices``
    (default: the last raw price seen at fit time, i.e. a continuation).
    Use ``state.first_price`` to reconstruct the fitted series itself.
    """
    anchors = state.last_price if initial_prices is None else initial_prices
    out = np.empty_like(series.values)
    for i, m in enumerate(series.channel_meta):
        col = series.values[:, i]
        if m.kind is ChannelKind.PRICE:
            if i not in state.ret_std or i not in anchors:
                raise PreprocessError(f"state has no price statistics for channel {m.column}")
            r = state.ret_mean[i] + state.ret_std[i] * col
            out[:, i] = anchors[i] * np.exp(np.cumsum(r))
        elif m.kind is ChannelKind.VOLUME:
            if i not in state.vol_min:
                raise PreprocessError(f"state has no volume statistics for channel {m.column}")
            out[:, i] = unscale_volume(col, state.vol_min[i], state.vol_max[i])
        else:
            out[:, i] = col
    return MultivariateSeries(out, list(series.channel_meta), series.timestamps, series.minute_offset)
