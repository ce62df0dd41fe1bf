"""Evaluation: correlations, 1-D Wasserstein, discriminative score, stylized facts."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy import stats
from torch import nn

from .data import MINUTES_PER_DAY, ChannelKind, MultivariateSeries
from .seeding import substream_seed

RETURN_LAGS = (1, 10, 20, 30)
VOL_DAY_LAGS = tuple(range(1, 11))
HORIZONS = (1, 15)
VOLUME_VOL_WINDOW = 2 * MINUTES_PER_DAY
VOLUME_VOL_BUCKET = 15


class InsufficientData(ValueError):
    pass


# --------------------------------------------------------------------------- correlation


def _is_constant(x: np.ndarray) -> bool:
    scale = float(np.max(np.abs(x))) if x.size else 0.0
    return float(np.sum((x - x.mean()) ** 2)) <= (16 * np.finfo(np.float64).eps) ** 2 * x.size * scale**2


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; 0 when either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 samples")
    if _is_constant(x) or _is_constant(y):
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Channel correlation matrix of a ``(T, C)`` array; constant channels correlate 0."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    var = (xc**2).sum(axis=0)
    scale = np.max(np.abs(x), axis=0) ** 2
    ok = var > (16 * np.finfo(np.float64).eps) ** 2 * x.shape[0] * scale
    inv = np.where(ok, 1.0 / np.sqrt(np.where(ok, var, 1.0)), 0.0)
    xn = xc * inv
    return np.clip(xn.T @ xn, -1.0, 1.0)


def cross_correlation_distance(real_pair, synth_pair) -> float:
    """Squared difference between the real and synthetic pair correlations."""
    (a, b), (sa, sb) = real_pair, synth_pair
    return (pearson(a, b) - pearson(sa, sb)) ** 2


@dataclass(frozen=True)
class CorrelationWindowSpec:
    window: int = MINUTES_PER_DAY
    stride: int | None = None  # defaults to the window (non-overlapping)

    def __post_init__(self) -> None:
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def step(self) -> int:
        return self.window if self.stride is None else self.stride


def _values(series) -> np.ndarray:
    return series.values if isinstance(series, MultivariateSeries) else np.asarray(series, dtype=np.float64)


def windowed_correlations(series, pair: tuple[int, int], spec: CorrelationWindowSpec) -> np.ndarray:
    x = _values(series)
    i, j = pair
    T = x.shape[0]
    if T < spec.window:
        raise ValueError(f"series of length {T} shorter than window {spec.window}")
    starts = range(0, T - spec.window + 1, spec.step)
    return np.array([pearson(x[s : s + spec.window, i], x[s : s + spec.window, j]) for s in starts])


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Order-1 Wasserstein distance between two empirical distributions.

    Integrates ``|F_a - F_b|`` over the merged support, which equals the
    quantile-coupling cost.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    allv = np.concatenate([a, b])
    allv.sort(kind="mergesort")
    deltas = np.diff(allv)
    cdf_a = np.searchsorted(a, allv[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, allv[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def channel_pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def correlation_benchmark(real, synth, spec: CorrelationWindowSpec, names: Sequence[str] | None = None) -> list[dict]:
    """Per channel pair, W1 between real and synthetic windowed-correlation distributions."""
    r, s = _values(real), _values(synth)
    if r.shape[1] != s.shape[1]:
        raise ValueError(f"channel layouts differ: {r.shape[1]} vs {s.shape[1]}")
    names = list(names) if names else [f"ch{i}" for i in range(r.shape[1])]
    rows = []
    for i, j in channel_pairs(r.shape[1]):
        rows.append({
            "pair": [names[i], names[j]],
            "wasserstein": wasserstein_1d(windowed_correlations(r, (i, j), spec),
                                          windowed_correlations(s, (i, j), spec)),
        })
    return rows


# --------------------------------------------------------------------------- discriminative score


class _SeqClassifier(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.rnn = nn.LSTM(channels, hidden, num_layers=1, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.rnn(x)
        return self.head(h[-1])[:, 0]


def _split(n: int, rng: np.random.Generator, test_frac: float) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(n * test_frac))
    return perm[n_test:], perm[:n_test]


def discriminative_score(
    real: np.ndarray,
    synth: np.ndarray,
    seed: int = 0,
    steps: int = 500,
    batch_size: int = 64,
    lr: float = 1e-3,
    test_frac: float = 0.2,
    constant_prediction: bool = False,
) -> float:
    """``|test accuracy - 0.5|`` of a one-layer LSTM separating real from synthetic windows.

    ``constant_prediction`` swaps the classifier for one that always answers "real".
    """
    real = np.asarray(real, dtype=np.float32)
    synth = np.asarray(synth, dtype=np.float32)
    if real.ndim != 3 or real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"window shapes differ: {real.shape[1:]} vs {synth.shape[1:]}")
    if len(real) < 20 or len(synth) < 20:
        raise ValueError("need at least 20 windows per side")
    rng = np.random.default_rng(substream_seed(seed, "disc-split"))
    r_tr, r_te = _split(len(real), rng, test_frac)
    s_tr, s_te = _split(len(synth), rng, test_frac)
    if len(r_te) != len(s_te) or len(r_tr) == 0 or len(s_tr) == 0:
        raise ValueError(
            f"class imbalance after split: {len(r_te)} real vs {len(s_te)} synthetic test windows"
        )
    x_tr = torch.from_numpy(np.concatenate([real[r_tr], synth[s_tr]]))
    y_tr = torch.cat([torch.ones(len(r_tr)), torch.zeros(len(s_tr))])
    x_te = torch.from_numpy(np.concatenate([real[r_te], synth[s_te]]))
    y_te = torch.cat([torch.ones(len(r_te)), torch.zeros(len(s_te))])
    if constant_prediction:
        pred = torch.ones_like(y_te)
    else:
        C = real.shape[2]
        with torch.random.fork_rng():
            torch.manual_seed(substream_seed(seed, "disc-model"))
            model = _SeqClassifier(C, max(8, C // 2))
            opt = torch.optim.Adam(model.parameters(), lr=lr)
            g = torch.Generator().manual_seed(substream_seed(seed, "disc-batches"))
            loss_fn = nn.BCEWithLogitsLoss()
            for _ in range(steps):
                idx = torch.randint(len(x_tr), (min(batch_size, len(x_tr)),), generator=g)
                opt.zero_grad()
                loss = loss_fn(model(x_tr[idx]), y_tr[idx])
                loss.backward()
                opt.step()
            with torch.no_grad():
                pred = (model(x_te) > 0).float()
    acc = float((pred == y_te).float().mean())
    return abs(acc - 0.5)


def cut_windows(x: np.ndarray, length: int, stride: int | None = None) -> np.ndarray:
    """Non-overlapping (by default) ``length``-row windows of a ``(T, C)`` array."""
    x = np.asarray(x)
    stride = stride or length
    starts = range(0, x.shape[0] - length + 1, stride)
    return np.stack([x[s : s + length] for s in starts]) if len(starts) else np.empty((0, length, x.shape[1]))


# --------------------------------------------------------------------------- stylized facts


def excess_kurtosis(x: np.ndarray) -> float:
    return float(stats.kurtosis(np.asarray(x, dtype=np.float64), fisher=True, bias=True))


def aggregate_returns(days: Sequence[np.ndarray], dt: int) -> np.ndarray:
    """Non-overlapping ``dt``-minute sums inside each day; never crosses a day boundary."""
    out = []
    for d in days:
        n = (len(d) // dt) * dt
        if n:
            out.append(d[:n].reshape(-1, dt).sum(axis=1))
    return np.concatenate(out) if out else np.empty(0)


def autocorrelation(x: np.ndarray, lag: int) -> float:
    """Sample ACF at ``lag`` (normalised by the full-sample variance)."""
    x = np.asarray(x, dtype=np.float64)
    if lag >= len(x):
        raise InsufficientData(f"lag {lag} needs more than {len(x)} samples")
    xc = x - x.mean()
    den = float(np.dot(xc, xc))
    if den == 0.0:
        return 0.0
    return float(np.dot(xc[:-lag], xc[lag:]) / den)


def pooled_autocorrelation(days: Sequence[np.ndarray], lag: int) -> float:
    """ACF at ``lag`` using only within-day pairs and the global mean."""
    m = float(np.mean(np.concatenate(days)))
    num = sum(float(np.dot(d[:-lag] - m, d[lag:] - m)) for d in days if len(d) > lag)
    den = sum(float(np.dot(d - m, d - m)) for d in days)
    return num / den if den else 0.0


def split_days(x: np.ndarray, per_day: int = MINUTES_PER_DAY) -> list[np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    return [x[s : s + per_day] for s in range(0, len(x), per_day)]


def intraday_log_returns(series: MultivariateSeries) -> tuple[list[np.ndarray], list[np.ndarray] | None, list[str]]:
    """Per-day ``(n_minutes-1, n_assets)`` log-returns and aligned volumes from a raw series."""
    pi = series.channels_of(ChannelKind.PRICE)
    vi = series.channels_of(ChannelKind.VOLUME)
    if not pi:
        raise InsufficientData("series has no price channels")
    if series.timestamps is not None:
        dates = np.array([ts.date().toordinal() for ts in series.timestamps])
    else:
        dates = (np.arange(series.T) + series.minute_offset) // MINUTES_PER_DAY
    rets, vols = [], []
    for d in np.unique(dates):
        rows = series.values[dates == d]
        if len(rows) < 2:
            continue
        rets.append(np.diff(np.log(rows[:, pi]), axis=0))
        if vi:
            vols.append(rows[1:, vi])
    tickers = [series.channel_meta[i].ticker for i in pi]
    return rets, (vols if vi else None), tickers


def volume_volatility_correlations(
    returns: np.ndarray,
    volumes: np.ndarray,
    window: int = VOLUME_VOL_WINDOW,
    bucket: int = VOLUME_VOL_BUCKET,
) -> np.ndarray:
    """One PCC per ``window``-step block between bucket mean volume and bucket return std."""
    out = []
    for s in range(0, len(returns) - window + 1, window):
        r = returns[s : s + window].reshape(-1, bucket)
        v = volumes[s : s + window].reshape(-1, bucket)
        out.append(pearson(v.mean(axis=1), r.std(axis=1)))
    return np.array(out)


def stylized_facts_report(
    day_returns: Sequence[np.ndarray],
    day_volumes: Sequence[np.ndarray] | None = None,
    tickers: Sequence[str] | None = None,
) -> dict:
    """Stylized-fact statistics per asset.

    ``day_returns`` holds one ``(n_minutes, n_assets)`` (or 1-D) array of intraday
    log-returns per trading day; ``day_volumes`` the traded volume aligned with it.
    """
    days = [np.asarray(d, dtype=np.float64).reshape(len(d), -1) for d in day_returns]
    if len(days) < 2:
        raise InsufficientData(f"stylized facts need >= 2 trading days, got {len(days)} (all statistics)")
    n_assets = days[0].shape[1]
    tickers = list(tickers) if tickers else [f"asset{i}" for i in range(n_assets)]
    vdays = None
    if day_volumes is not None:
        vdays = [np.asarray(v, dtype=np.float64).reshape(len(v), -1) for v in day_volumes]
    out = {}
    for a in range(n_assets):
        per_day = [d[:, a] for d in days]
        n_total = sum(len(d) for d in per_day)
        entry: dict = {"n_returns": n_total, "heavy_tails": {}}
        for dt in HORIZONS:
            agg = aggregate_returns(per_day, dt)
            if agg.size < 8:
                raise InsufficientData(f"{tickers[a]}: too few {dt}-minute returns for kurtosis")
            jb = stats.jarque_bera(agg)
            entry["heavy_tails"][f"dt{dt}"] = {
                "n": int(agg.size),
                "excess_kurtosis": excess_kurtosis(agg),
                "jarque_bera": float(jb.statistic),
            }
        k1 = entry["heavy_tails"]["dt1"]["excess_kurtosis"]
        k15 = entry["heavy_tails"]["dt15"]["excess_kurtosis"]
        entry["aggregational_normality"] = bool(abs(k15) < abs(k1))
        acs = {}
        for lag in RETURN_LAGS:
            vals = [autocorrelation(d, lag) for d in per_day if len(d) > lag]
            if not vals:
                raise InsufficientData(f"{tickers[a]}: days too short for return autocorrelation at lag {lag}")
            acs[f"lag{lag}"] = {
                "per_day": vals,
                "mean": float(np.mean(vals)),
                "pooled": pooled_autocorrelation(per_day, lag),
            }
        entry["return_autocorrelation"] = acs
        entry["confidence_band"] = 2.0 / np.sqrt(n_total)
        daily_vol = np.array([d.std() for d in per_day])
        lags = [k for k in VOL_DAY_LAGS if k < len(daily_vol)]
        entry["daily_volatility"] = daily_vol.tolist()
        entry["volatility_autocorrelation"] = {f"lag{k}": autocorrelation(daily_vol, k) for k in lags}
        if vdays is not None:
            r = np.concatenate(per_day)
            v = np.concatenate([vd[:, a] for vd in vdays])
            vv = volume_volatility_correlations(r, v)
            entry["volume_volatility"] = {"per_window": vv.tolist(),
                                          "mean": float(vv.mean()) if vv.size else None}
        out[tickers[a]] = entry
    return out


# --------------------------------------------------------------------------- full report


@dataclass
class EvaluationReport:
    stylized_facts: dict = field(default_factory=dict)  # {"real": {...}, "synthetic": {...}}
    correlations: list[dict] = field(default_factory=list)
    discriminative_score: float | None = None
    settings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["stylized_facts", "correlations", "discriminative_score", "settings"],
    "additionalProperties": False,
    "properties": {
        "stylized_facts": {"type": "object"},
        "correlations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["pair", "cross_correlation_distance", "wasserstein"],
                "properties": {
                    "pair": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                    "cross_correlation_distance": {"type": "number", "minimum": 0},
                    "wasserstein": {"type": "number", "minimum": 0},
                },
            },
        },
        "discriminative_score": {"type": ["number", "null"], "minimum": 0, "maximum": 0.5},
        "settings": {"type": "object"},
    },
}


def evaluate(
    real: MultivariateSeries,
    synth: MultivariateSeries,
    window: CorrelationWindowSpec = CorrelationWindowSpec(),
    disc_window: int = 24,
    seed: int = 0,
    disc_steps: int = 500,
) -> tuple[EvaluationReport, dict[str, np.ndarray]]:
    """Full comparison of two series with identical channel layouts.

    Returns the report and the raw distributions behind it (for figure data).
    """
    if real.columns != synth.columns:
        raise ValueError(f"channel layouts differ: {real.columns} vs {synth.columns}")
    names = real.columns
    dists: dict[str, np.ndarray] = {}
    report = EvaluationReport(settings={
        "correlation_window": window.window, "correlation_stride": window.step,
        "disc_window": disc_window, "seed": seed,
    })
    if real.channels_of(ChannelKind.PRICE):
        for label, s in (("real", real), ("synthetic", synth)):
            rets, vols, tickers = intraday_log_returns(s)
            try:
                report.stylized_facts[label] = stylized_facts_report(rets, vols, tickers)
            except InsufficientData as e:
                report.stylized_facts[label] = {"error": str(e)}
    win = window if min(real.T, synth.T) >= window.window else CorrelationWindowSpec(min(real.T, synth.T))
    for i, j in channel_pairs(real.C):
        wr = windowed_correlations(real, (i, j), win)
        ws = windowed_correlations(synth, (i, j), win)
        key = f"{names[i]}__{names[j]}"
        dists[f"corr_real_{key}"] = wr
        dists[f"corr_synth_{key}"] = ws
        report.correlations.append({
            "pair": [names[i], names[j]],
            "cross_correlation_distance": cross_correlation_distance(
                (real.values[:, i], real.values[:, j]), (synth.values[:, i], synth.values[:, j])),
            "wasserstein": wasserstein_1d(wr, ws),
        })
    rw, sw = cut_windows(real.values, disc_window), cut_windows(synth.values, disc_window)
    n = min(len(rw), len(sw))
    if n >= 20:
        report.discriminative_score = discriminative_score(rw[:n], sw[:n], seed=seed, steps=disc_steps)
    return report, dists
