"""Adam and the half-period cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    state: AdamState,
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    lr: float,
) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def cosine_lr(t: float, T: float, eta0: float = 0.1) -> float:
    """``eta0 * 0.5 * (1 + cos(pi * t / T))`` for ``0 <= t <= T``."""
    if T <= 0:
        raise ValueError("total steps must be positive")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside [0, {T}]")
    if t == T:
        return 0.0
    return eta0 * 0.5 * (1.0 + math.cos(math.pi * t / T))


@dataclass(frozen=True)
class CosineSchedule:
    total_steps: int
    eta0: float = 0.1

    def __call__(self, t: int) -> float:
        return cosine_lr(t, self.total_steps, self.eta0)
