"""Residual 1-D ECG encoder and the non-linear projection head."""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

DESK_WIDTHS = (16, 32, 64, 128)
FULL_WIDTHS = (64, 128, 196, 256)


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: int, name: str):
        super().__init__(f"non-finite activation after layer {layer} ({name})")
        self.layer = layer


@dataclass(frozen=True)
class EncoderConfig:
    n_leads: int = 8
    n_blocks: int = 4
    stem_kernel: int = 17
    block_kernel: int = 15
    widths: tuple[int, ...] = DESK_WIDTHS
    stride: int = 4
    embedding_dim: int = 256
    projection_dims: tuple[int, ...] = (256, 128)
    bn_momentum: float = 0.9
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "projection_dims", tuple(self.projection_dims))
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if len(self.widths) != self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks but {len(self.widths)} widths")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0 < self.bn_momentum < 1:
            raise ValueError("bn_momentum must lie in (0, 1)")

    @classmethod
    def full(cls, **kw) -> "EncoderConfig":
        return cls(widths=FULL_WIDTHS, **kw)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


_relu_trace: list | None = None


@contextmanager
def trace_rectifiers():
    """Collect the sign pattern of every rectifier input inside the block."""
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def rectify(x: torch.Tensor) -> torch.Tensor:
    # torch.relu has subgradient 0 at exactly 0
    if _relu_trace is not None:
        _relu_trace.append((x.detach() > 0).cpu().numpy().ravel())
    return torch.relu(x)


def _norm(channels: int, cfg: EncoderConfig) -> nn.BatchNorm1d:
    # our momentum is the weight kept on the running estimate
    return nn.BatchNorm1d(channels, momentum=1.0 - cfg.bn_momentum, eps=1e-5)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cfg: EncoderConfig):
        super().__init__()
        k = cfg.block_kernel
        self.conv1 = nn.Conv1d(c_in, c_out, k, stride=cfg.stride, padding=k // 2, bias=False)
        self.norm1 = _norm(c_out, cfg)
        self.conv2 = nn.Conv1d(c_out, c_out, k, padding=k // 2, bias=False)
        self.norm2 = _norm(c_out, cfg)
        if c_in != c_out or cfg.stride != 1:
            self.skip = nn.Conv1d(c_in, c_out, 1, stride=cfg.stride, bias=False)
        else:
            self.skip = None

    def forward(self, x):
        y = rectify(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        s = x if self.skip is None else self.skip(x)
        return rectify(y + s)


class ResNetEncoder(nn.Module):
    """stem conv -> residual blocks -> global average pool -> linear embedding.

    Input is ``[B, T, n_leads]`` (time-major, as produced by preprocessing).
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.stem_kernel
        self.stem = nn.Conv1d(cfg.n_leads, cfg.widths[0], k, padding=k // 2, bias=False)
        self.stem_norm = _norm(cfg.widths[0], cfg)
        chans = (cfg.widths[0],) + tuple(cfg.widths)
        self.blocks = nn.ModuleList(ResidualBlock(chans[i], chans[i + 1], cfg) for i in range(cfg.n_blocks))
        self.embed = nn.Linear(cfg.widths[-1], cfg.embedding_dim)

    def forward(self, x, check_finite: bool = True):
        if x.ndim != 3 or x.shape[2] != self.cfg.n_leads:
            raise ValueError(f"expected [B, T, {self.cfg.n_leads}] input, got {tuple(x.shape)}")
        h = rectify(self.stem_norm(self.stem(x.transpose(1, 2))))
        stages = [("stem", h)]
        for i, block in enumerate(self.blocks):
            h = block(h)
            stages.append((f"block{i + 1}", h))
        out = self.embed(h.mean(dim=2))
        stages.append(("embed", out))
        if check_finite:
            for layer, (name, t) in enumerate(stages):
                if not torch.isfinite(t).all():
                    raise NonFiniteActivationError(layer, name)
        return out


class ProjectionHead(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dims = (cfg.embedding_dim,) + cfg.projection_dims
        self.layers = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))

    def forward(self, h):
        if h.shape[-1] != self.layers[0].in_features:
            raise ValueError(f"expected embedding dim {self.layers[0].in_features}, got {h.shape[-1]}")
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = rectify(h)
        return h


class CapeNet(nn.Module):
    """Encoder plus projection head; only the encoder is used after pretraining."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg)
        self.projection = ProjectionHead(cfg)
        init_params(self, seed)
        self.to(cfg.dtype)

    def forward(self, x):
        return self.projection(self.encoder(x))


def init_params(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights; unit scale / zero shift for normalisation."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
            if isinstance(m, (nn.Conv1d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            elif isinstance(m, nn.BatchNorm1d):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
                m.reset_running_stats()


def _as_tensor(x, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def encoder_forward(net: CapeNet, batch, train: bool = False) -> torch.Tensor:
    """Embeddings ``[B, embedding_dim]`` for a ``[B, T, n_leads]`` batch."""
    net.train(train)
    return net.encoder(_as_tensor(batch, net.cfg.dtype))


def projection_forward(net: CapeNet, embeddings) -> torch.Tensor:
    return net.projection(_as_tensor(embeddings, net.cfg.dtype))


@torch.no_grad()
def embed_array(net: CapeNet, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Evaluation-mode embeddings of ``[n, T, L]`` as float32 numpy."""
    net.eval()
    out = [net.encoder(_as_tensor(x[i : i + batch_size], net.cfg.dtype)) for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, net.cfg.embedding_dim), dtype=np.float32)
    return torch.cat(out).to(torch.float32).numpy()


def named_parameters(net: nn.Module) -> dict[str, torch.Tensor]:
    return dict(net.named_parameters())
