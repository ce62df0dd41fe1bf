"""Layers, spectral normalisation, Adam and checkpoint I/O on top of torch autograd.

Every stochastic layer takes its ``torch.Generator`` explicitly; nothing here
touches torch's global RNG.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

LEAKY_SLOPE = 0.2
DEFAULT_DROPOUT = 0.1
SN_EPS = 1e-12
SN_BLOCK = 16  # left vectors kept per spectral-norm layer


class ShapeError(ValueError):
    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")
        self.expected = tuple(expected)
        self.actual = tuple(actual)


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def check_shape(x: Tensor, expected: tuple, what: str) -> None:
    """``None`` entries in ``expected`` match any size."""
    if x.dim() != len(expected) or any(e is not None and e != a for e, a in zip(expected, x.shape)):
        raise ShapeError(what, tuple("*" if e is None else e for e in expected), x.shape)


def _init_weight(w: Tensor, gen: torch.Generator | None) -> None:
    # centered uniform scaled by fan-in, leaky-ReLU gain
    nn.init.kaiming_uniform_(w, a=LEAKY_SLOPE, nonlinearity="leaky_relu", generator=gen)


# --------------------------------------------------------------------------- spectral norm


def _orthonormal(m: Tensor) -> Tensor:
    """Orthonormal basis of the columns of ``m`` (QR with a deterministic sign)."""
    q, r = torch.linalg.qr(m)
    d = torch.sign(torch.diagonal(r))
    return q * torch.where(d == 0, torch.ones_like(d), d)


def spectral_normalize(
    weight: Tensor, u: Tensor, power_iters: int = 1, update: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is viewed as ``out x (everything else)``. ``u`` is either one left
    vector ``(out,)`` or a block ``(out, k)``; a block is iterated as a subspace and
    the estimate is the largest singular value of ``U^T W V``, which converges at
    rate ``s_{k+1}/s_1`` instead of ``s_2/s_1`` when the top of the spectrum is flat.
    Returns the normalised weight (differentiable w.r.t. ``weight``), the refreshed
    ``u`` and the estimate. A zero matrix comes back unchanged.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    w2 = weight.reshape(weight.shape[0], -1)
    single = u.ndim == 1
    with torch.no_grad():
        u_ = (u[:, None] if single else u).to(w2.dtype)
        v_ = _orthonormal(w2.t() @ u_)
        if update:
            for i in range(power_iters):
                if i:
                    v_ = _orthonormal(w2.t() @ u_)
                u_ = _orthonormal(w2 @ v_)
    sigma = torch.linalg.svdvals(u_.t() @ w2 @ v_)[0]
    u_out = u_[:, 0] if single else u_
    if float(sigma.detach()) <= SN_EPS:
        return weight, u_out, sigma.detach().clamp_min(SN_EPS)
    return weight / sigma.clamp_min(SN_EPS), u_out, sigma.detach()


class SpectralNorm(nn.Module):
    """Wrap a :class:`Dense` or :class:`Conv1d` so its weight is spectrally normalised.

    In train mode every forward runs ``power_iters`` iterations and persists ``u``
    (a block of ``min(block, out, in)`` left vectors); in eval mode the stored ``u``
    is reused untouched. ``gen`` is accepted for signature symmetry; ``u`` starts
    from an SVD of the initial weight.
    """

    def __init__(
        self,
        layer: "Dense | Conv1d",
        power_iters: int = 1,
        gen: torch.Generator | None = None,
        block: int = SN_BLOCK,
    ):
        super().__init__()
        self.layer = layer
        self.power_iters = power_iters
        w2 = layer.weight.detach().reshape(layer.weight.shape[0], -1).double()
        k = max(1, min(block, *w2.shape))
        u = torch.linalg.svd(w2, full_matrices=False)[0][:, :k]
        sign = torch.sign(u.sum(dim=0))
        u = u * torch.where(sign == 0, torch.ones_like(sign), sign)
        self.register_buffer("u", u.to(layer.weight.dtype))

    def normalized_weight(self, power_iters: int | None = None, update: bool | None = None) -> Tensor:
        update = self.training if update is None else update
        w, u, _ = spectral_normalize(
            self.layer.weight, self.u, power_iters or self.power_iters, update=update
        )
        if update:
            self.u.copy_(u.to(self.u.dtype))
        return w

    def forward(self, x: Tensor) -> Tensor:
        return self.layer.apply_weight(x, self.normalized_weight())


# --------------------------------------------------------------------------- layers


class Dense(nn.Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None
        _init_weight(self.weight.data, gen)

    def apply_weight(self, x: Tensor, weight: Tensor) -> Tensor:
        if x.shape[-1] != weight.shape[1]:
            raise ShapeError("Dense input", (..., weight.shape[1]), x.shape)
        return F.linear(x, weight, self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.apply_weight(x, self.weight)


class Conv1d(nn.Module):
    """1-D convolution over ``(batch, channels, length)``.

    ``padding='causal'`` left-pads by ``(k-1)*dilation`` so the output at step t
    only sees inputs at steps <= t and the length is preserved.
    """

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        dilation: int = 1,
        stride: int = 1,
        padding: str | int = "causal",
        gen: torch.Generator | None = None,
    ):
        super().__init__()
        if kernel_size < 1 or dilation < 1 or stride < 1:
            raise ValueError("kernel_size, dilation and stride must be >= 1")
        self.kernel_size, self.dilation, self.stride, self.padding = kernel_size, dilation, stride, padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c_out))
        _init_weight(self.weight.data, gen)

    def _pad(self, x: Tensor) -> Tensor:
        span = (self.kernel_size - 1) * self.dilation
        if self.padding == "causal":
            return F.pad(x, (span, 0))
        if self.padding == "same":
            return F.pad(x, (span // 2, span - span // 2))
        return F.pad(x, (int(self.padding), int(self.padding)))

    def apply_weight(self, x: Tensor, weight: Tensor) -> Tensor:
        check_shape(x, (None, weight.shape[1], None), "Conv1d input")
        if self.padding == "causal" and self.stride == 1:
            # taps reaching further back than the input only ever see padding
            n_eff = min(self.kernel_size, (x.shape[-1] - 1) // self.dilation + 1)
            w = weight[:, :, self.kernel_size - n_eff :]
            xp = F.pad(x, ((n_eff - 1) * self.dilation, 0))
            return F.conv1d(xp, w, self.bias, dilation=self.dilation)
        return F.conv1d(self._pad(x), weight, self.bias, stride=self.stride, dilation=self.dilation)

    def forward(self, x: Tensor) -> Tensor:
        return self.apply_weight(x, self.weight)

    def out_length(self, length: int) -> int:
        span = (self.kernel_size - 1) * self.dilation
        if self.padding in ("causal", "same"):
            padded = length + span
        else:
            padded = length + 2 * int(self.padding)
        return (padded - span - 1) // self.stride + 1


class Dropout(nn.Module):
    def __init__(self, p: float = DEFAULT_DROPOUT):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor, rng: torch.Generator | None = None) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if rng is None:
            raise ValueError("Dropout in train mode needs an explicit rng")
        keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= self.p
        return x * keep / (1.0 - self.p)


def leaky_relu(x: Tensor) -> Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


class TemporalBlock(nn.Module):
    """Two dilated convolutions with a residual connection; length-preserving."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int = 3,
        dilation: int = 1,
        dropout: float = DEFAULT_DROPOUT,
        causal: bool = True,
        gen: torch.Generator | None = None,
    ):
        super().__init__()
        pad = "causal" if causal else "same"
        self.conv1 = Conv1d(c_in, c_out, kernel_size, dilation, padding=pad, gen=gen)
        self.conv2 = Conv1d(c_out, c_out, kernel_size, dilation, padding=pad, gen=gen)
        self.drop = Dropout(dropout)
        self.residual = Conv1d(c_in, c_out, 1, gen=gen) if c_in != c_out else None

    def forward(self, x: Tensor, rng: torch.Generator | None = None) -> Tensor:
        h = self.drop(leaky_relu(self.conv1(x)), rng)
        h = self.conv2(h)
        res = x if self.residual is None else self.residual(x)
        return h + res


def sinusoidal_embedding(index: Tensor | int | np.ndarray, dim: int) -> Tensor:
    """Interleaved ``[sin, cos, sin, cos, ...]`` encoding with base-10000 wavelengths."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    idx = torch.as_tensor(index, dtype=torch.float64)
    if torch.any(idx < 0):
        raise ValueError("embedding index must be >= 0")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * 2.0 * k / dim)
    ang = idx[..., None] * freq
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*idx.shape, dim).to(torch.get_default_dtype())


class TimeEmbedding(nn.Module):
    """Sinusoidal code -> Dense -> SiLU -> Dense."""

    def __init__(
        self,
        dim: int,
        n_out: int,
        spectral: bool = False,
        gen: torch.Generator | None = None,
    ):
        super().__init__()
        self.dim = dim
        l1, l2 = Dense(dim, dim, gen=gen), Dense(dim, n_out, gen=gen)
        if spectral:
            l1, l2 = SpectralNorm(l1, gen=gen), SpectralNorm(l2, gen=gen)
        self.fc1, self.fc2 = l1, l2

    def forward(self, index: Tensor) -> Tensor:
        e = sinusoidal_embedding(index, self.dim).to(self._dtype())
        return self.fc2(F.silu(self.fc1(e)))

    def _dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


@dataclass
class LayerSpec:
    """Declarative description of one layer; see :func:`build_layer`."""

    kind: str  # dense|conv1d|temporal_block|leaky_relu|silu|tanh|dropout|spectral_norm|sinusoidal_embedding
    settings: dict = field(default_factory=dict)
    inner: "LayerSpec | None" = None  # wrapped layer for spectral_norm

    def validate(self) -> None:
        s = self.settings
        if s.get("kernel_size", 1) < 1:
            raise ValueError("kernel size must be >= 1")
        if s.get("dilation", 1) < 1:
            raise ValueError("dilation must be >= 1")
        if not 0.0 <= s.get("p", 0.0) < 1.0:
            raise ValueError("drop probability must be in [0, 1)")


class _Fn(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, x: Tensor) -> Tensor:
        return self.fn(x)


def build_layer(spec: LayerSpec, gen: torch.Generator | None = None) -> nn.Module:
    spec.validate()
    s = spec.settings
    kind = spec.kind
    if kind == "dense":
        return Dense(s["n_in"], s["n_out"], gen=gen)
    if kind == "conv1d":
        return Conv1d(
            s["c_in"], s["c_out"], s.get("kernel_size", 1), s.get("dilation", 1),
            s.get("stride", 1), s.get("padding", "causal"), gen=gen,
        )
    if kind == "temporal_block":
        return TemporalBlock(
            s["c_in"], s["c_out"], s.get("kernel_size", 3), s.get("dilation", 1),
            s.get("p", DEFAULT_DROPOUT), s.get("causal", True), gen=gen,
        )
    if kind == "leaky_relu":
        slope = s.get("negative_slope", LEAKY_SLOPE)
        return _Fn(lambda x: F.leaky_relu(x, slope))
    if kind == "silu":
        return _Fn(F.silu)
    if kind == "tanh":
        return _Fn(torch.tanh)
    if kind == "dropout":
        return Dropout(s.get("p", DEFAULT_DROPOUT))
    if kind == "spectral_norm":
        if spec.inner is None:
            raise ValueError("spectral_norm needs an inner layer spec")
        return SpectralNorm(build_layer(spec.inner, gen), s.get("power_iters", 1), gen=gen)
    if kind == "sinusoidal_embedding":
        dim = s["dim"]
        if dim % 2:
            raise ValueError("embedding dim must be even")
        return _Fn(lambda i: sinusoidal_embedding(i, dim))
    raise ValueError(f"unknown layer kind {kind!r}")


# --------------------------------------------------------------------------- Adam


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place; moments are kept in float64."""
    for name, g in grads.items():
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        st = state.setdefault(name, {"step": 0})
        if "m" not in st:
            st["m"] = torch.zeros(p.shape, dtype=torch.float64)
            st["v"] = torch.zeros(p.shape, dtype=torch.float64)
        st["step"] += 1
        g64 = g.detach().to(torch.float64)
        st["m"].mul_(b1).add_(g64, alpha=1 - b1)
        st["v"].mul_(b2).addcmul_(g64, g64, value=1 - b2)
        m_hat = st["m"] / (1 - b1 ** st["step"])
        v_hat = st["v"] / (1 - b2 ** st["step"])
        upd = lr * m_hat / (v_hat.sqrt() + eps)
        with torch.no_grad():
            p.copy_((p.detach().to(torch.float64) - upd).to(p.dtype))


class Adam:
    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def step(self) -> None:
        params = dict(self.module.named_parameters())
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        adam_step(params, grads, self.state, self.lr, self.betas, self.eps)

    def state_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name, st in sorted(self.state.items()):
            out[f"{prefix}/{name}/step"] = torch.tensor([st["step"]], dtype=torch.int64)
            out[f"{prefix}/{name}/m"] = st["m"]
            out[f"{prefix}/{name}/v"] = st["v"]
        return out

    def load_state_tensors(self, prefix: str, tensors: Mapping[str, Tensor]) -> None:
        self.state = {}
        names = dict(self.module.named_parameters())
        for key, t in tensors.items():
            if not key.startswith(prefix + "/"):
                continue
            name, field_ = key[len(prefix) + 1 :].rsplit("/", 1)
            if name not in names:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            st = self.state.setdefault(name, {})
            st[field_] = int(t[0]) if field_ == "step" else t.clone()
            if field_ != "step" and tuple(t.shape) != tuple(names[name].shape):
                raise CheckpointError(
                    f"optimizer state {name}: shape {tuple(t.shape)} != {tuple(names[name].shape)}"
                )


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"COMETSCK"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "u1"),
}
_DTYPE_NAMES = {v[0]: k for k, v in _DTYPES.items()}
META_KEY = "__meta__"


def save_tensors(tensors: Mapping[str, Tensor], path: str | Path, meta: dict | None = None) -> None:
    """Write tensors (plus an optional JSON ``meta`` blob) in the COMETSCK layout."""
    items = dict(tensors)
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        items[META_KEY] = torch.tensor(list(blob), dtype=torch.uint8)
    manifest, payloads = [], []
    for name, t in items.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dname = _DTYPE_NAMES[t.dtype]
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dname})
        payloads.append(t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes())
    mbytes = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def load_tensors(path: str | Path) -> tuple[dict[str, Tensor], dict | None]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    data = path.read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 12)
    off = 20
    if off + mlen > len(data):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from None
    off += mlen
    out: dict[str, Tensor] = {}
    for entry in manifest:
        tdtype, npdtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(npdtype).itemsize
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(data, dtype=npdtype, count=int(np.prod(shape, dtype=np.int64)), offset=off)
        out[entry["name"]] = torch.from_numpy(arr.copy().reshape(shape)).to(tdtype)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    meta = None
    if META_KEY in out:
        meta = json.loads(bytes(out.pop(META_KEY).tolist()).decode("utf-8"))
    return out, meta


def load_module_state(module: nn.Module, tensors: Mapping[str, Tensor], prefix: str) -> None:
    """Copy ``prefix/<state_dict key>`` tensors into ``module`` with strict shape checks."""
    own = module.state_dict()
    for key, ref in own.items():
        full = f"{prefix}/{key}"
        if full not in tensors:
            raise CheckpointError(f"checkpoint lacks {full}")
        t = tensors[full]
        if tuple(t.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {full}: checkpoint {tuple(t.shape)}, model {tuple(ref.shape)}"
            )
    module.load_state_dict({k: tensors[f"{prefix}/{k}"].to(v.dtype) for k, v in own.items()})


def module_tensors(module: nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g


def parameter_count(modules: Iterable[nn.Module]) -> int:
    return sum(p.numel() for m in modules for p in m.parameters())
