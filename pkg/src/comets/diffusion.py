"""DDPM trainer/sampler for multivariate windows, with critic-guided sampling."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import nn as cnn
from .gan import Critic, CriticConfig, TrainingAborted, _from_dict, wgan_losses
from .seeding import substream_seed


MAX_DEFAULT_BETA = 0.5


class GuidanceError(ValueError):
    pass


# --------------------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("every beta must lie in [0, 1)")
        self.alphas = 1.0 - self.betas
        # alpha_bars[t] for t = 0..T, with alpha_bars[0] = 1
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])

    @property
    def T_steps(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    @classmethod
    def linear(cls, T_steps: int = 100, beta_start: float | None = None, beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas; endpoints default to 1e-4 and 0.02 rescaled by ``1000 / T_steps``.

        The rescaling keeps the terminal signal fraction near zero for short
        schedules; scaled defaults are capped at 0.5.
        """
        scale = 1000.0 / T_steps
        lo = min(1e-4 * scale, MAX_DEFAULT_BETA) if beta_start is None else beta_start
        hi = min(0.02 * scale, MAX_DEFAULT_BETA) if beta_end is None else beta_end
        return cls(np.linspace(lo, hi, T_steps))

    def to_json(self) -> dict:
        return {"betas": self.betas.tolist()}


def forward_sample(x0: Tensor, t, schedule: NoiseSchedule, rng: torch.Generator) -> tuple[Tensor, Tensor]:
    """Closed-form ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-row tensor."""
    x0 = torch.as_tensor(x0)
    tt = torch.as_tensor(t, dtype=torch.int64)
    if torch.any(tt < 1) or torch.any(tt > schedule.T_steps):
        raise ValueError(f"diffusion step must lie in [1, {schedule.T_steps}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[tt]
    ab = ab.reshape(ab.shape + (1,) * (x0.dim() - ab.dim()))
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps, eps


# --------------------------------------------------------------------------- epsilon network


@dataclass
class EpsNetConfig:
    F: int
    channels: int
    hidden: int = 64
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    step_dim: int = 32


class EpsNet(nn.Module):
    """Non-causal temporal-block stack; the diffusion step embedding is added before each block."""

    def __init__(self, cfg: EpsNetConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden
        self.inp = cnn.Conv1d(cfg.channels, H, 1, gen=gen)
        self.step_embed = cnn.TimeEmbedding(cfg.step_dim, H, gen=gen)
        self.blocks = nn.ModuleList(
            cnn.TemporalBlock(H, H, cfg.kernel_size, d, dropout=0.0, causal=False, gen=gen)
            for d in cfg.dilations
        )
        self.outp = cnn.Conv1d(H, cfg.channels, 1, gen=gen)
        with torch.no_grad():
            self.outp.weight.zero_()  # start as the zero predictor, loss 1 per element

    def forward(self, x: Tensor, t: Tensor) -> Tensor:
        cfg = self.cfg
        cnn.check_shape(x, (None, cfg.F, cfg.channels), "eps-net input")
        t = torch.as_tensor(t, dtype=torch.int64)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = self.step_embed(t).unsqueeze(-1)  # (B, H, 1)
        h = self.inp(x.transpose(1, 2))
        for block in self.blocks:
            h = cnn.leaky_relu(block(h + emb))
        return self.outp(h).transpose(1, 2)


@dataclass
class DiffusionTrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 2000
    seed: int = 0
    log_every: int = 50


@dataclass
class DiffusionModel:
    cfg: EpsNetConfig
    schedule: NoiseSchedule
    train_cfg: DiffusionTrainConfig
    net: EpsNet
    opt: cnn.Adam
    step: int = 0

    @classmethod
    def init(cls, cfg: EpsNetConfig, schedule: NoiseSchedule, train_cfg: DiffusionTrainConfig) -> "DiffusionModel":
        net = EpsNet(cfg, cnn.make_generator(substream_seed(train_cfg.seed, "init")))
        return cls(cfg, schedule, train_cfg, net, cnn.Adam(net, train_cfg.lr))

    def meta(self) -> dict:
        return {
            "kind": "diffusion",
            "step": self.step,
            "eps_net": dataclasses.asdict(self.cfg),
            "schedule": self.schedule.to_json(),
            "train": dataclasses.asdict(self.train_cfg),
        }

    def save(self, path: str | Path) -> None:
        t = cnn.module_tensors(self.net, "eps_net")
        t.update(self.opt.state_tensors("optim"))
        cnn.save_tensors(t, path, self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "DiffusionModel":
        tensors, meta = cnn.load_tensors(path)
        if not meta or meta.get("kind") != "diffusion":
            raise cnn.CheckpointError(f"{path}: not a diffusion checkpoint")
        m = cls.init(
            _from_dict(EpsNetConfig, meta["eps_net"]),
            NoiseSchedule(np.array(meta["schedule"]["betas"])),
            _from_dict(DiffusionTrainConfig, meta["train"]),
        )
        cnn.load_module_state(m.net, tensors, "eps_net")
        m.opt.load_state_tensors("optim", tensors)
        m.step = int(meta.get("step", 0))
        return m


def denoising_loss(net, x0: Tensor, schedule: NoiseSchedule, rng: torch.Generator) -> Tensor:
    """``mean ||eps - eps_net(x_t, t)||^2`` per element, ``t`` uniform on ``1..T``."""
    t = torch.randint(1, schedule.T_steps + 1, (x0.shape[0],), generator=rng)
    x_t, eps = forward_sample(x0, t, schedule, rng)
    return ((eps - net(x_t, t)) ** 2).mean()


def train_diffusion(
    windows: np.ndarray | Sequence[np.ndarray],
    cfg: EpsNetConfig,
    schedule: NoiseSchedule,
    train_cfg: DiffusionTrainConfig,
    model: DiffusionModel | None = None,
) -> tuple[DiffusionModel, list[dict]]:
    data = torch.as_tensor(np.asarray(windows), dtype=torch.float32)
    if data.dim() != 3 or data.shape[0] == 0:
        raise ValueError("windows must be a non-empty (N, F, C) stack")
    cnn.check_shape(data, (None, cfg.F, cfg.channels), "diffusion windows")
    if model is None:
        model = DiffusionModel.init(cfg, schedule, train_cfg)
    rng = cnn.make_generator(substream_seed(train_cfg.seed, "train"))
    B = min(train_cfg.batch_size, data.shape[0])
    records, acc = [], []
    t0 = time.perf_counter()
    model.net.train()
    for _ in range(train_cfg.steps):
        step = model.step + 1
        x0 = data[torch.randint(data.shape[0], (B,), generator=rng)]
        loss = denoising_loss(model.net, x0, schedule, rng)
        if not torch.isfinite(loss):
            raise TrainingAborted(step, f"denoising loss is {float(loss.detach())}")
        model.opt.zero_grad()
        loss.backward()
        try:
            model.opt.step()
        except cnn.NonFiniteGradient as e:
            raise TrainingAborted(step, str(e)) from None
        acc.append(float(loss.detach()))
        model.step = step
        if step % train_cfg.log_every == 0:
            records.append({"step": step, "loss": float(np.mean(acc)),
                            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)})
            acc = []
    if acc:
        records.append({"step": model.step, "loss": float(np.mean(acc)),
                        "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)})
    model.net.eval()
    return model, records


# --------------------------------------------------------------------------- sampling


@dataclass
class GuidanceConfig:
    w: float
    critic: Critic | None = None
    mode: str = "zero_past"  # "zero_past" | "unconditional"
    minute_offset: int = 0  # minute-of-day assigned to the first step the critic sees

    def validate(self, F_: int, C: int) -> None:
        if not math.isfinite(self.w):
            raise GuidanceError("guidance weight must be finite")
        if self.w == 0.0:
            return
        if self.critic is None:
            raise GuidanceError("non-zero guidance needs a critic")
        cc = self.critic.cfg
        if (cc.F, cc.channels) != (F_, C):
            raise GuidanceError(f"critic expects windows {cc.F}x{cc.channels}, diffusion emits {F_}x{C}")
        if self.mode not in ("zero_past", "unconditional"):
            raise GuidanceError(f"unknown critic input mode {self.mode!r}")
        if self.mode == "unconditional" and cc.P != 0:
            raise GuidanceError("unconditional mode needs a critic built with P = 0")


def critic_score(critic: Critic, x: Tensor, mode: str = "zero_past", minute_offset: int = 0) -> Tensor:
    """Per-window critic score of bare windows ``x`` ``(B, F, C)`` (eval mode)."""
    cc = critic.cfg
    B = x.shape[0]
    P = 0 if mode == "unconditional" else cc.P
    past = torch.zeros(B, P, cc.channels, dtype=x.dtype)
    minutes = (torch.arange(P + cc.F) + minute_offset).expand(B, -1)
    critic.eval()
    return critic(past, x, minutes)[0]


def critic_gradient(critic: Critic, x: Tensor, mode: str = "zero_past", minute_offset: int = 0) -> Tensor:
    """``d D(x) / d x`` for each window (windows are scored independently)."""
    xg = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        score = critic_score(critic, xg, mode, minute_offset).sum()
        (grad,) = torch.autograd.grad(score, xg)
    return grad


def _window_generators(seed: int, count: int) -> list[torch.Generator]:
    return [cnn.make_generator(substream_seed(seed, "sample", i)) for i in range(count)]


def _randn(gens: list[torch.Generator], shape: tuple[int, ...]) -> Tensor:
    return torch.stack([torch.randn(shape, generator=g) for g in gens])


def guided_eps(eps: Tensor, x_t: Tensor, t: int, schedule: NoiseSchedule, guidance: GuidanceConfig) -> Tensor:
    """Noise-space form of score guidance: ``eps - w sqrt(1 - abar_t) grad_x D(x_t)``."""
    if guidance.w == 0.0:
        return eps
    g = critic_gradient(guidance.critic, x_t, guidance.mode, guidance.minute_offset)
    return eps - guidance.w * math.sqrt(1.0 - schedule.alpha_bar(t)) * g.to(eps.dtype)


def sample_guided(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    count: int,
    seed: int,
) -> Tensor:
    """Ancestral sampling with reverse variance ``beta_t``; window ``i`` draws from its own stream."""
    cfg = model.net.cfg
    guidance.validate(cfg.F, cfg.channels)
    gens = _window_generators(seed, count)
    shape = (cfg.F, cfg.channels)
    x = _randn(gens, shape)
    model.net.eval()
    for t in range(schedule.T_steps, 0, -1):
        with torch.no_grad():
            eps = model.net(x, torch.full((count,), t, dtype=torch.int64))
        eps = guided_eps(eps, x, t, schedule, guidance)
        beta, ab = schedule.beta(t), schedule.alpha_bar(t)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        x = mean + math.sqrt(beta) * _randn(gens, shape) if t > 1 else mean
    return x.detach()


def sample_unguided(model: DiffusionModel, schedule: NoiseSchedule, count: int, seed: int) -> Tensor:
    return sample_guided(model, schedule, GuidanceConfig(w=0.0), count, seed)


def fit_unconditional_critic(
    real: np.ndarray,
    fake: np.ndarray,
    cfg: CriticConfig,
    steps: int = 500,
    lr: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
) -> Critic:
    """Train a past-free critic (``cfg.P == 0``) to separate fixed real and generated windows."""
    if cfg.P != 0:
        raise ValueError("unconditional critic needs P = 0")
    g_init = cnn.make_generator(substream_seed(seed, "uncond-init"))
    critic = Critic(cfg, g_init)
    opt = cnn.Adam(critic, lr, (0.5, 0.9))
    rng = cnn.make_generator(substream_seed(seed, "uncond-train"))
    real_t = torch.as_tensor(real, dtype=torch.float32)
    fake_t = torch.as_tensor(fake, dtype=torch.float32)
    B = min(batch_size, len(real_t), len(fake_t))
    minutes = torch.arange(cfg.F).expand(2 * B, -1)
    critic.train()
    for _ in range(steps):
        xr = real_t[torch.randint(len(real_t), (B,), generator=rng)]
        xf = fake_t[torch.randint(len(fake_t), (B,), generator=rng)]
        o, _, _ = critic(torch.zeros(2 * B, 0, cfg.channels), torch.cat([xr, xf]), minutes, rng)
        loss, _ = wgan_losses(o[:B], o[B:])
        opt.zero_grad()
        loss.backward()
        opt.step()
    critic.eval()
    return critic


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_sample_dump(samples: Tensor | np.ndarray, out_dir: str | Path, manifest: dict,
                      columns: Sequence[str] | None = None) -> None:
    """One CSV per window (``window_0000.csv`` ...) plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(samples, dtype=np.float64)
    cols = list(columns) if columns else [f"ch{i}" for i in range(arr.shape[2])]
    for k, win in enumerate(arr):
        p = out / f"window_{k:04d}.csv"
        tmp = p.with_name(p.name + ".tmp")
        with tmp.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in win:
                w.writerow([repr(float(v)) for v in row])
        tmp.replace(p)
    mp = out / "manifest.json"
    tmp = mp.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps({**manifest, "count": int(arr.shape[0])}, indent=2, sort_keys=True) + "\n")
    tmp.replace(mp)
