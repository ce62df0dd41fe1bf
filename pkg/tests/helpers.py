"""Shared test utilities: gradient probes, layer cases and brute-force metric oracles."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

from comets.nn import Conv1d, Dense, LayerSpec, SpectralNorm, TemporalBlock, build_layer, make_generator


def fd_max_rel_error(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    n_probe: int = 5,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative gap between autograd and central differences on random entries.

    ``loss_fn`` must be a deterministic scalar function of ``tensors`` (float64 leaves).
    The relative error uses ``max(|analytic|, |numeric|, floor)`` as denominator.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors), allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([t.numel() for t in tensors], dtype=torch.float64)
    worst = 0.0
    for _ in range(n_probe):
        k = int(torch.multinomial(sizes, 1, generator=g))
        t = tensors[k]
        i = int(torch.randint(t.numel(), (1,), generator=g))
        flat = t.data.view(-1)
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = 0.0 if grads[k] is None else float(grads[k].reshape(-1)[i])
        denom = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def projected(out: torch.Tensor, seed: int = 1) -> torch.Tensor:
    """Scalar ``sum(out * R)`` with a fixed random ``R``, so every output entry matters."""
    r = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)
    return (out * r).sum()


def g(seed: int = 0) -> torch.Generator:
    return make_generator(seed)


# layer kind -> (constructor, input shape)
LAYER_CASES = {
    "dense": (lambda: Dense(4, 3, gen=g(0)), (5, 4)),
    "conv1d_causal": (lambda: Conv1d(2, 3, 3, dilation=2, gen=g(0)), (2, 2, 9)),
    "conv1d_same": (lambda: Conv1d(2, 3, 3, dilation=2, padding="same", gen=g(0)), (2, 2, 9)),
    "conv1d_strided": (lambda: Conv1d(2, 3, 5, stride=2, padding=2, gen=g(0)), (2, 2, 12)),
    "temporal_block": (lambda: TemporalBlock(2, 4, 3, 2, dropout=0.0, gen=g(0)), (2, 2, 10)),
    "leaky_relu": (lambda: build_layer(LayerSpec("leaky_relu")), (3, 4)),
    "silu": (lambda: build_layer(LayerSpec("silu")), (3, 4)),
    "tanh": (lambda: build_layer(LayerSpec("tanh")), (3, 4)),
    "spectral_dense": (lambda: SpectralNorm(Dense(4, 3, gen=g(0)), gen=g(0)), (5, 4)),
    "spectral_conv": (lambda: SpectralNorm(Conv1d(2, 3, 5, stride=2, padding=2, gen=g(0)), gen=g(0)), (2, 2, 12)),
}


def pearson_oracle(x, y) -> float:
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    cov = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = math.fsum((a - mx) ** 2 for a in x)
    vy = math.fsum((b - my) ** 2 for b in y)
    if vx == 0 or vy == 0:
        return 0.0
    return cov / math.sqrt(vx * vy)


def wasserstein_oracle(a, b) -> float:
    """Integrate ``|Q_a(u) - Q_b(u)|`` over the merged quantile grid."""
    a, b = sorted(a), sorted(b)
    na, nb = len(a), len(b)
    knots = sorted({i / na for i in range(na + 1)} | {j / nb for j in range(nb + 1)})
    total = []
    for lo, hi in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (lo + hi)
        total.append((hi - lo) * abs(a[min(int(mid * na), na - 1)] - b[min(int(mid * nb), nb - 1)]))
    return math.fsum(total)


def windowed_oracle(x, i, j, window, stride):
    out, s = [], 0
    while s + window <= len(x):
        out.append(pearson_oracle(list(x[s : s + window, i]), list(x[s : s + window, j])))
        s += stride
    return out
