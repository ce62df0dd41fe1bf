"""Conditional Wasserstein GAN with a correlation-scoring critic."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import nn as cnn
from .data import SegmentPair, time_bins
from .seeding import substream_seed

log = logging.getLogger(__name__)


class TrainingAborted(FloatingPointError):
    """Raised when a loss or gradient turns non-finite; carries the step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


# --------------------------------------------------------------------------- configs


@dataclass
class GeneratorConfig:
    P: int
    F: int
    channels: int
    hidden: int = 64
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    time_dim: int = 32
    dropout: float = cnn.DEFAULT_DROPOUT
    bounded_channels: tuple[int, ...] = ()  # tanh-squashed outputs, e.g. scaled volumes

    def validate(self) -> None:
        if self.P < 1 or self.F < 2 or self.channels < 1:
            raise ValueError(f"need P >= 1, F >= 2, channels >= 1 (got {self.P}, {self.F}, {self.channels})")
        if len(self.dilations) != 7:
            raise ValueError("the generator uses exactly 7 temporal blocks")
        if any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError("dilations must be strictly increasing")
        if any(not 0 <= c < self.channels for c in self.bounded_channels):
            raise ValueError("bounded channel index out of range")


@dataclass
class CriticConfig:
    P: int
    F: int
    channels: int
    conv_channels: tuple[int, ...] = (32, 64, 128, 256)
    kernel_size: int = 5
    stride: int = 2
    linear: tuple[int, ...] = (256, 128)
    alpha: float = 1.0
    time_dim: int = 32
    dropout: float = cnn.DEFAULT_DROPOUT
    power_iters: int = 1

    @property
    def n_pairs(self) -> int:
        return self.channels * (self.channels - 1) // 2

    def validate(self) -> None:
        if self.P < 0 or self.F < 2 or self.channels < 2:
            raise ValueError("critic needs P >= 0, F >= 2 and at least two channels")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class GanTrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.9)
    batch_size: int = 64
    critic_steps: int = 5
    gen_steps: int = 1000
    seed: int = 0
    eval_every: int = 50
    holdout_fraction: float = 0.1

    def validate(self) -> None:
        if min(self.lr_g, self.lr_d, self.batch_size, self.critic_steps, self.eval_every) <= 0:
            raise ValueError("learning rates, batch size, critic steps and eval cadence must be positive")
        if self.gen_steps < 0:
            raise ValueError("gen_steps must be >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")


# --------------------------------------------------------------------------- correlation features


def pairwise_correlation_features(x: Tensor) -> Tensor:
    """Pearson coefficient of every channel pair ``(i, j), i < j``, in row-major order.

    ``x`` is ``(F, C)`` or ``(B, F, C)``. Constant channels give 0 with zero gradient.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise cnn.ShapeError("correlation input", ("B", "F", "C"), x.shape)
    B, Fl, C = x.shape
    if Fl < 2:
        raise ValueError(f"correlation needs at least 2 time steps, got {Fl}")
    xc = x - x.mean(dim=1, keepdim=True)
    var = (xc * xc).sum(dim=1)  # (B, C)
    scale = (x.detach() ** 2).amax(dim=1).clamp_min(torch.finfo(x.dtype).tiny)
    tol = (16 * torch.finfo(x.dtype).eps) ** 2 * Fl * scale
    ok = var > tol
    inv = torch.rsqrt(torch.where(ok, var, torch.ones_like(var)))
    inv = torch.where(ok, inv, torch.zeros_like(inv))
    xn = xc * inv.unsqueeze(1)
    corr = xn.transpose(1, 2) @ xn  # (B, C, C)
    iu = torch.triu_indices(C, C, offset=1)
    out = corr[:, iu[0], iu[1]]
    return out[0] if squeeze else out


# --------------------------------------------------------------------------- networks


def _batch(x: Tensor, minutes: Tensor) -> tuple[Tensor, Tensor, bool]:
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    minutes = torch.as_tensor(minutes)
    if minutes.dim() == 1:
        minutes = minutes.unsqueeze(0).expand(x.shape[0], -1)
    return x, minutes, single


class Generator(nn.Module):
    """Seven dilated temporal blocks fed ``[h ; z]``; a final dense layer emits ``F x C``."""

    def __init__(self, cfg: GeneratorConfig, gen: torch.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, H = cfg.channels, cfg.hidden
        self.time_embed = cnn.TimeEmbedding(cfg.time_dim, C, gen=gen)
        self.blocks = nn.ModuleList()
        c_in = C
        for d in cfg.dilations:
            self.blocks.append(cnn.TemporalBlock(c_in + C, H, cfg.kernel_size, d, cfg.dropout, gen=gen))
            c_in = H
        self.drops = nn.ModuleList(cnn.Dropout(cfg.dropout) for _ in cfg.dilations)
        self.out = cnn.Dense(H * cfg.P, cfg.F * C, gen=gen)
        mask = torch.zeros(C, dtype=torch.bool)
        mask[list(cfg.bounded_channels)] = True
        self.register_buffer("bounded", mask, persistent=False)

    def sample_noise(self, batch: int, rng: torch.Generator) -> Tensor:
        dtype = self.out.weight.dtype
        return torch.randn(batch, self.cfg.P, self.cfg.channels, generator=rng, dtype=dtype)

    def forward(
        self,
        x_past: Tensor,
        minutes: Tensor,
        z: Tensor | None = None,
        rng: torch.Generator | None = None,
    ) -> Tensor:
        """``x_past`` ``(B, P, C)``, ``minutes`` minutes-of-day over ``P + F`` steps."""
        cfg = self.cfg
        x_past, minutes, single = _batch(x_past, minutes)
        cnn.check_shape(x_past, (None, cfg.P, cfg.channels), "generator x_past")
        B = x_past.shape[0]
        if z is None:
            if rng is None:
                raise ValueError("generator needs either z or an rng to draw it")
            z = self.sample_noise(B, rng)
        z = z.unsqueeze(0) if z.dim() == 2 else z
        cnn.check_shape(z, (B, cfg.P, cfg.channels), "generator noise")
        cnn.check_shape(minutes, (B, cfg.P + cfg.F), "generator minutes")
        bins = torch.as_tensor(time_bins(minutes[:, : cfg.P].cpu().numpy()))
        zt = (z + self.time_embed(bins)).transpose(1, 2)  # (B, C, P)
        h = x_past.transpose(1, 2)
        for block, drop in zip(self.blocks, self.drops):
            h = drop(cnn.leaky_relu(block(torch.cat([h, zt], dim=1), rng)), rng)
        y = self.out(h.reshape(B, -1)).reshape(B, cfg.F, cfg.channels)
        y = torch.where(self.bounded, torch.tanh(y), y)
        return y[0] if single else y


class Critic(nn.Module):
    """Spectral-normalised conv/linear stack (``o1``) plus a correlation head (``o2``)."""

    def __init__(self, cfg: CriticConfig, gen: torch.Generator | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        SN = lambda layer: cnn.SpectralNorm(layer, cfg.power_iters, gen=gen)  # noqa: E731
        self.time_embed = cnn.TimeEmbedding(cfg.time_dim, 1, spectral=True, gen=gen)
        self.convs = nn.ModuleList()
        c_in, length = cfg.channels + 1, cfg.P + cfg.F
        for c_out in cfg.conv_channels:
            conv = cnn.Conv1d(c_in, c_out, cfg.kernel_size, stride=cfg.stride,
                              padding=(cfg.kernel_size - 1) // 2, gen=gen)
            length = conv.out_length(length)
            if length < 1:
                raise ValueError("critic conv stack shrinks the window to nothing")
            self.convs.append(SN(conv))
            c_in = c_out
        self.linears = nn.ModuleList()
        n_in = c_in * length
        for n_out in (*cfg.linear, 1):
            self.linears.append(SN(cnn.Dense(n_in, n_out, gen=gen)))
            n_in = n_out
        self.drop = cnn.Dropout(cfg.dropout)
        self.corr_head = SN(cnn.Dense(cfg.n_pairs, 1, gen=gen))

    def spectral_layers(self) -> list[tuple[str, cnn.SpectralNorm]]:
        return [(n, m) for n, m in self.named_modules() if isinstance(m, cnn.SpectralNorm)]

    def weight_matrices(self, power_iters: int | None = None) -> dict[str, Tensor]:
        """Normalised weights as 2-D ``out x in`` matrices; ``power_iters`` refines ``u`` first."""
        out = {}
        with torch.no_grad():
            for name, m in self.spectral_layers():
                if power_iters:
                    w = m.normalized_weight(power_iters, update=True)
                else:
                    w = m.normalized_weight(update=False)
                out[name] = w.reshape(w.shape[0], -1).clone()
        return out

    def realness(self, x_past: Tensor, x_future: Tensor, minutes: Tensor, rng=None) -> Tensor:
        cfg = self.cfg
        B = x_future.shape[0]
        x = torch.cat([x_past, x_future], dim=1)  # (B, P+F, C)
        bins = torch.as_tensor(time_bins(minutes.cpu().numpy()))
        emb = self.time_embed(bins)  # (B, P+F, 1)
        h = torch.cat([x, emb], dim=2).transpose(1, 2)
        for conv in self.convs:
            h = self.drop(cnn.leaky_relu(conv(h)), rng)
        h = h.reshape(B, -1)
        for i, lin in enumerate(self.linears):
            h = lin(h)
            if i < len(self.linears) - 1:
                h = self.drop(cnn.leaky_relu(h), rng)
        return h[:, 0]

    def correlation_score(self, x_future: Tensor) -> Tensor:
        return self.corr_head(pairwise_correlation_features(x_future))[:, 0]

    def forward(
        self,
        x_past: Tensor,
        x_future: Tensor,
        minutes: Tensor,
        rng: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(o, o1, o2)`` per batch element, with ``o = o1 + alpha * o2``."""
        cfg = self.cfg
        x_future, minutes, single = _batch(x_future, minutes)
        B = x_future.shape[0]
        if x_past.dim() == 2:
            x_past = x_past.unsqueeze(0)
        cnn.check_shape(x_past, (B, cfg.P, cfg.channels), "critic x_past")
        cnn.check_shape(x_future, (B, cfg.F, cfg.channels), "critic x_future")
        cnn.check_shape(minutes, (B, cfg.P + cfg.F), "critic minutes")
        o1 = self.realness(x_past, x_future, minutes, rng)
        o2 = self.correlation_score(x_future)
        o = o1 + cfg.alpha * o2
        if single:
            return o[0], o1[0], o2[0]
        return o, o1, o2


def wgan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Critic loss ``mean D(fake) - mean D(real)`` and generator loss ``-mean D(fake)``."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("empty batch")
    if d_real.shape != d_fake.shape:
        raise ValueError(f"real/fake batch sizes differ: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}")
    loss_d = d_fake.mean() - d_real.mean()
    return loss_d, -d_fake.mean()


# --------------------------------------------------------------------------- model + persistence


@dataclass
class GanModel:
    gen_cfg: GeneratorConfig
    critic_cfg: CriticConfig
    train_cfg: GanTrainConfig
    generator: Generator
    critic: Critic
    opt_g: cnn.Adam
    opt_d: cnn.Adam
    step: int = 0

    @classmethod
    def init(cls, gen_cfg, critic_cfg, train_cfg, dtype=torch.float32) -> "GanModel":
        if (gen_cfg.P, gen_cfg.F, gen_cfg.channels) != (critic_cfg.P, critic_cfg.F, critic_cfg.channels):
            raise ValueError("generator and critic windows/channels differ")
        g_init = cnn.make_generator(substream_seed(train_cfg.seed, "init"))
        G = Generator(gen_cfg, g_init).to(dtype)
        D = Critic(critic_cfg, g_init).to(dtype)
        return cls(
            gen_cfg, critic_cfg, train_cfg, G, D,
            cnn.Adam(G, train_cfg.lr_g, train_cfg.betas),
            cnn.Adam(D, train_cfg.lr_d, train_cfg.betas),
        )

    def generate(self, x_past: Tensor, minutes: Tensor, rng: torch.Generator) -> Tensor:
        self.generator.eval()
        with torch.no_grad():
            return self.generator(x_past, minutes, rng=rng)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        out.update(cnn.module_tensors(self.generator, "generator"))
        out.update(cnn.module_tensors(self.critic, "critic"))
        out.update(self.opt_g.state_tensors("optim_g"))
        out.update(self.opt_d.state_tensors("optim_d"))
        return out

    def meta(self) -> dict:
        return {
            "kind": "gan",
            "step": self.step,
            "generator": dataclasses.asdict(self.gen_cfg),
            "critic": dataclasses.asdict(self.critic_cfg),
            "train": dataclasses.asdict(self.train_cfg),
            "dtype": str(self.generator.out.weight.dtype).replace("torch.", ""),
        }

    def save(self, path: str | Path) -> None:
        cnn.save_tensors(self.tensors(), path, self.meta())

    @classmethod
    def load(cls, path: str | Path, expect: GeneratorConfig | None = None) -> "GanModel":
        tensors, meta = cnn.load_tensors(path)
        if not meta or meta.get("kind") != "gan":
            raise cnn.CheckpointError(f"{path}: not a GAN checkpoint")
        gcfg = _from_dict(GeneratorConfig, meta["generator"])
        if expect is not None:
            gcfg = expect
        ccfg = _from_dict(CriticConfig, meta["critic"])
        if expect is not None:
            ccfg = dataclasses.replace(ccfg, P=expect.P, F=expect.F, channels=expect.channels)
        tcfg = _from_dict(GanTrainConfig, meta["train"])
        model = cls.init(gcfg, ccfg, tcfg, dtype=getattr(torch, meta.get("dtype", "float32")))
        cnn.load_module_state(model.generator, tensors, "generator")
        cnn.load_module_state(model.critic, tensors, "critic")
        model.opt_g.load_state_tensors("optim_g", tensors)
        model.opt_d.load_state_tensors("optim_d", tensors)
        model.step = int(meta.get("step", 0))
        return model


def _from_dict(cls, d: dict):
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in d:
            v = d[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


# --------------------------------------------------------------------------- training


@dataclass
class SegmentTensors:
    past: Tensor
    future: Tensor
    minutes: Tensor

    @classmethod
    def from_pairs(cls, pairs: Sequence[SegmentPair], dtype=torch.float32) -> "SegmentTensors":
        return cls(
            torch.as_tensor(np.stack([p.past for p in pairs]), dtype=dtype),
            torch.as_tensor(np.stack([p.future for p in pairs]), dtype=dtype),
            torch.as_tensor(np.stack([p.minute_of_day for p in pairs]), dtype=torch.int64),
        )

    def __len__(self) -> int:
        return self.past.shape[0]

    def take(self, idx) -> "SegmentTensors":
        return SegmentTensors(self.past[idx], self.future[idx], self.minutes[idx])


def split_holdout(pairs: Sequence[SegmentPair], fraction: float) -> tuple[list, list]:
    """Final ``fraction`` of pairs (at least one) is held out, never shuffled into training."""
    n_hold = max(1, int(math.ceil(len(pairs) * fraction)))
    if n_hold >= len(pairs):
        raise ValueError(f"dataset of {len(pairs)} pairs too small for a held-out slice")
    return list(pairs[:-n_hold]), list(pairs[-n_hold:])


def mean_cross_correlation_distance(real: np.ndarray, synth: np.ndarray) -> float:
    """Mean over channel pairs of ``(rho_real - rho_synth)^2`` on two ``(T, C)`` arrays."""
    from .metrics import correlation_matrix

    C = real.shape[1]
    iu = np.triu_indices(C, k=1)
    return float(np.mean((correlation_matrix(real)[iu] - correlation_matrix(synth)[iu]) ** 2))


def holdout_ccd(model: GanModel, holdout: SegmentTensors, seed: int) -> float:
    """Cross-correlation distance between stacked held-out futures and generated ones.

    Pairs are taken at stride F so the stacked futures form a contiguous slice.
    """
    F_ = model.gen_cfg.F
    sub = holdout.take(slice(0, len(holdout), F_))
    rng = cnn.make_generator(substream_seed(seed, "eval"))
    fake = model.generate(sub.past, sub.minutes, rng)
    C = model.gen_cfg.channels
    real = sub.future.reshape(-1, C).double().numpy()
    synth = fake.reshape(-1, C).double().numpy()
    return mean_cross_correlation_distance(real, synth)


def _finite(t: Tensor) -> bool:
    return bool(torch.isfinite(t).all())


def train_gan(
    dataset: Sequence[SegmentPair],
    gen_cfg: GeneratorConfig,
    critic_cfg: CriticConfig,
    train_cfg: GanTrainConfig,
    callbacks: Sequence[Callable[[dict], None]] = (),
    dtype: torch.dtype = torch.float32,
    model: GanModel | None = None,
) -> tuple[GanModel, list[dict]]:
    """Alternate ``critic_steps`` critic updates with one generator update.

    Returns the trained model and the training log (one record per eval cadence,
    plus one at step 0).
    """
    train_cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")
    P, F_ = dataset[0].past.shape[0], dataset[0].future.shape[0]
    if (P, F_) != (gen_cfg.P, gen_cfg.F):
        raise ValueError(f"dataset windows (P={P}, F={F_}) do not match config ({gen_cfg.P}, {gen_cfg.F})")
    train_pairs, hold_pairs = split_holdout(dataset, train_cfg.holdout_fraction)
    train = SegmentTensors.from_pairs(train_pairs, dtype)
    hold = SegmentTensors.from_pairs(hold_pairs, dtype)
    if model is None:
        model = GanModel.init(gen_cfg, critic_cfg, train_cfg, dtype)
    G, D = model.generator, model.critic
    rng = cnn.make_generator(substream_seed(train_cfg.seed, "train"))
    B = min(train_cfg.batch_size, len(train))

    def batch() -> SegmentTensors:
        return train.take(torch.randint(len(train), (B,), generator=rng))

    records: list[dict] = []
    t0 = time.perf_counter()

    def emit(step: int, ld: list[float], lg: list[float]) -> None:
        rec = {
            "step": step,
            "loss_D": float(np.mean(ld)) if ld else None,
            "loss_G": float(np.mean(lg)) if lg else None,
            "mean_ccd": holdout_ccd(model, hold, train_cfg.seed),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        records.append(rec)
        for cb in callbacks:
            cb(rec)

    emit(model.step, [], [])
    ld_acc: list[float] = []
    lg_acc: list[float] = []
    for _ in range(train_cfg.gen_steps):
        step = model.step + 1
        G.train()
        D.train()
        for _k in range(train_cfg.critic_steps):
            b = batch()
            with torch.no_grad():
                fake = G(b.past, b.minutes, rng=rng)
            o, _, _ = D(
                torch.cat([b.past, b.past]),
                torch.cat([b.future, fake]),
                torch.cat([b.minutes, b.minutes]),
                rng,
            )
            loss_d, _ = wgan_losses(o[:B], o[B:])
            if not _finite(loss_d):
                raise TrainingAborted(step, f"critic loss is {float(loss_d.detach())}")
            model.opt_d.zero_grad()
            loss_d.backward()
            try:
                model.opt_d.step()
            except cnn.NonFiniteGradient as e:
                raise TrainingAborted(step, str(e)) from None
            ld_acc.append(float(loss_d.detach()))
        b = batch()
        fake = G(b.past, b.minutes, rng=rng)
        o, _, _ = D(b.past, fake, b.minutes, rng)
        loss_g = -o.mean()
        if not _finite(loss_g):
            raise TrainingAborted(step, f"generator loss is {float(loss_g.detach())}")
        model.opt_g.zero_grad()
        loss_g.backward()
        try:
            model.opt_g.step()
        except cnn.NonFiniteGradient as e:
            raise TrainingAborted(step, str(e)) from None
        D.zero_grad(set_to_none=True)
        lg_acc.append(float(loss_g.detach()))
        model.step = step
        if step % train_cfg.eval_every == 0:
            emit(step, ld_acc, lg_acc)
            ld_acc, lg_acc = [], []
    if ld_acc:
        emit(model.step, ld_acc, lg_acc)
    G.eval()
    D.eval()
    return model, records


def write_log(records: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    tmp.replace(path)
