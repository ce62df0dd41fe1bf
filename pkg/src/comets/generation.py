"""Autoregressive rollout, additive shocks and reactivity experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import nn as cnn
from .data import MINUTES_PER_DAY, ChannelMeta, MultivariateSeries, PreprocessState, invert_preprocess, raw_layout
from .gan import GanModel
from .metrics import cut_windows, pearson
from .seeding import substream_seed


class RolloutAborted(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"rollout aborted at generated step {step}: {message}")
        self.step = step


@dataclass
class RolloutConfig:
    total_steps: int
    seed: int
    past: np.ndarray  # (P, C) starting window, model space
    start_minute: int = 0  # minute-of-day of the first row of ``past``
    channel_meta: list[ChannelMeta] | None = None

    def validate(self, P: int, C: int) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        past = np.asarray(self.past)
        if past.shape != (P, C):
            raise ValueError(f"starting window must be {P}x{C}, got {past.shape}")
        if not np.all(np.isfinite(past)):
            raise ValueError("starting window contains non-finite values")
        if self.channel_meta is not None and len(self.channel_meta) != C:
            raise ValueError("channel_meta length differs from channel count")


@dataclass
class PerturbationSpec:
    channels: tuple[int, ...]
    t_start: int
    t_end: int
    intensity: float

    def validate(self, total_steps: int | None = None, C: int | None = None) -> None:
        if not self.channels:
            raise ValueError("perturbation needs at least one target channel")
        if self.t_start < 0 or self.t_end <= self.t_start:
            raise ValueError(f"empty or negative perturbation window [{self.t_start}, {self.t_end})")
        if total_steps is not None and self.t_end > total_steps:
            raise ValueError(f"perturbation window ends at {self.t_end}, beyond rollout of {total_steps} steps")
        if C is not None and any(not 0 <= c < C for c in self.channels):
            raise ValueError(f"target channels {self.channels} out of range for {C} channels")
        if not math.isfinite(self.intensity):
            raise ValueError("perturbation intensity must be finite")


def apply_perturbation(segment: np.ndarray, spec: PerturbationSpec, offset: int = 0) -> np.ndarray:
    """Shift target channels on the rows of ``segment`` inside the window by ``a * std``.

    ``offset`` is the rollout index of the segment's first row; the standard
    deviation is the population one, taken over the affected rows only.
    """
    spec.validate(C=segment.shape[1])
    out = np.array(segment, dtype=np.float64, copy=True)
    lo = max(spec.t_start - offset, 0)
    hi = min(spec.t_end - offset, out.shape[0])
    if hi <= lo or spec.intensity == 0.0:
        return out
    for c in spec.channels:
        col = out[lo:hi, c]
        out[lo:hi, c] = col + spec.intensity * col.std()
    return out


@dataclass
class RolloutResult:
    series: MultivariateSeries  # model space
    raw: MultivariateSeries | None  # price/volume space when a preprocessing state was given
    calls: int


def rollout(
    model: GanModel,
    config: RolloutConfig,
    perturbation: PerturbationSpec | None = None,
    state: PreprocessState | None = None,
    initial_prices: dict[int, float] | None = None,
) -> RolloutResult:
    """Generate ``F`` rows at a time, feeding the last ``P`` rows back as the next past window."""
    g = model.gen_cfg
    P, F_, C = g.P, g.F, g.channels
    config.validate(P, C)
    if perturbation is not None:
        perturbation.validate(config.total_steps, C)
    dtype = model.generator.out.weight.dtype
    rng = cnn.make_generator(substream_seed(config.seed, "rollout"))
    history = np.asarray(config.past, dtype=np.float64)
    produced: list[np.ndarray] = []
    n = calls = 0
    minute = config.start_minute
    while n < config.total_steps:
        past = torch.as_tensor(history[-P:], dtype=dtype).unsqueeze(0)
        minutes = (torch.arange(P + F_) + minute) % MINUTES_PER_DAY
        block = model.generate(past, minutes, rng)[0].double().numpy()
        calls += 1
        if not np.all(np.isfinite(block)):
            bad = int(np.argwhere(~np.isfinite(block))[0, 0])
            raise RolloutAborted(n + bad, "generator emitted a non-finite value")
        if perturbation is not None:
            block = apply_perturbation(block, perturbation, offset=n)
        produced.append(block)
        history = np.concatenate([history[-P:], block])
        n += F_
        minute = (minute + F_) % MINUTES_PER_DAY
    values = np.concatenate(produced)[: config.total_steps]
    meta = config.channel_meta or raw_layout(C)
    series = MultivariateSeries(values, list(meta), minute_offset=(config.start_minute + P) % MINUTES_PER_DAY)
    raw = invert_preprocess(series, state, initial_prices) if state is not None else None
    return RolloutResult(series, raw, calls)


# --------------------------------------------------------------------------- reactivity

CURVES = ("real_real", "synth_synth", "perturbed_vs_frozen", "perturbed_vs_reactive")


def _stats(xs: Sequence[float]) -> tuple[float, float, int]:
    a = np.asarray(xs, dtype=np.float64)
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se, int(a.size)


def reactivity_experiment(
    model: GanModel,
    base: RolloutConfig,
    spec: PerturbationSpec,
    intensities: Sequence[float],
    seeds: Sequence[int],
    real: np.ndarray | MultivariateSeries | None = None,
    pad: int = 0,
) -> list[dict]:
    """Paired perturbed/unperturbed rollouts; correlations over ``[t_start - pad, t_end + pad)``.

    Entries carry ``curve``, ``pair``, ``intensity``, ``mean_corr``, ``stderr`` and ``n_seeds``.
    ``perturbed_vs_frozen`` pairs the shocked target with the other channel of the
    unperturbed twin; ``perturbed_vs_reactive`` uses the other channel of the shocked run.
    """
    C = model.gen_cfg.channels
    spec.validate(base.total_steps, C)
    if not seeds:
        raise ValueError("need at least one seed")
    lo, hi = max(spec.t_start - pad, 0), min(spec.t_end + pad, base.total_steps)
    if hi - lo < 2:
        raise ValueError("correlation span needs at least two rows")
    pairs = [(t, o) for t in spec.channels for o in range(C) if o not in spec.channels]
    if not pairs:
        raise ValueError("perturbation covers every channel; nothing can react")

    real_corr: dict[tuple[int, int], list[float]] = {}
    if real is not None:
        vals = real.values if isinstance(real, MultivariateSeries) else np.asarray(real, dtype=np.float64)
        wins = cut_windows(vals, hi - lo)
        for p in pairs:
            real_corr[p] = [pearson(w[:, p[0]], w[:, p[1]]) for w in wins]

    base_runs = {}
    for s in seeds:
        cfg = RolloutConfig(base.total_steps, s, base.past, base.start_minute, base.channel_meta)
        base_runs[s] = rollout(model, cfg).series.values

    report: list[dict] = []
    for a in intensities:
        shock = PerturbationSpec(tuple(spec.channels), spec.t_start, spec.t_end, float(a))
        acc = {(c, p): [] for c in CURVES[1:] for p in pairs}
        for s in seeds:
            cfg = RolloutConfig(base.total_steps, s, base.past, base.start_minute, base.channel_meta)
            pert = rollout(model, cfg, shock).series.values
            ref = base_runs[s]
            if not np.array_equal(pert[: spec.t_start], ref[: spec.t_start]):
                raise AssertionError("paired rollouts diverged before the shock")
            for t, o in pairs:
                acc[("synth_synth", (t, o))].append(pearson(ref[lo:hi, t], ref[lo:hi, o]))
                acc[("perturbed_vs_frozen", (t, o))].append(pearson(pert[lo:hi, t], ref[lo:hi, o]))
                acc[("perturbed_vs_reactive", (t, o))].append(pearson(pert[lo:hi, t], pert[lo:hi, o]))
        for p in pairs:
            if p in real_corr and real_corr[p]:
                m, se, k = _stats(real_corr[p])
                report.append(_entry("real_real", p, a, m, se, k))
            for c in CURVES[1:]:
                m, se, k = _stats(acc[(c, p)])
                report.append(_entry(c, p, a, m, se, k))
    return report


def _entry(curve: str, pair: tuple[int, int], a: float, mean: float, se: float, n: int) -> dict:
    return {"curve": curve, "pair": list(pair), "intensity": float(a), "mean_corr": mean, "stderr": se, "n_seeds": n}
