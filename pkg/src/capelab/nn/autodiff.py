"""Reverse-mode gradients over named parameters and a finite-difference checker."""

from __future__ import annotations

import warnings
from typing import Callable, Mapping

import numpy as np
import torch

from .encoder import trace_rectifiers


class DisconnectedParameterWarning(UserWarning):
    pass


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every named parameter.

    Parameters the loss does not depend on get an exact zero gradient and a
    :class:`DisconnectedParameterWarning`.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        if g is None:
            warnings.warn(f"loss does not depend on parameter {name!r}", DisconnectedParameterWarning, stacklevel=2)
            g = torch.zeros_like(p)
        out[name] = g
    return out


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    min_scale: float = 1e-6,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[float, int]:
    """Max relative error between ``backward`` and central differences.

    ``fn`` recomputes the scalar loss from the current parameter values.
    Elements whose +/-eps perturbation flips the sign of any rectifier input
    are skipped as kink-adjacent. The relative error of one element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, min_scale)``.

    Returns ``(max_rel_err, n_skipped)``.
    """
    if not eps > 0:
        raise ValueError(f"invalid eps {eps}: must be positive")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check needs 64-bit parameters; {name!r} is {p.dtype}")

    with trace_rectifiers() as base_trace:
        loss = fn()
    base_pattern = [t.copy() for t in base_trace]
    analytic = backward(loss, params)

    worst = 0.0
    skipped = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_elements is not None and idx.size > max_elements:
                idx = (rng or np.random.default_rng(0)).choice(idx, max_elements, replace=False)
            g_a = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                with trace_rectifiers() as t_plus:
                    f_plus = fn().item()
                flat[i] = orig - eps
                with trace_rectifiers() as t_minus:
                    f_minus = fn().item()
                flat[i] = orig
                if _pattern_changed(base_pattern, t_plus) or _pattern_changed(base_pattern, t_minus):
                    skipped += 1
                    continue
                numeric = (f_plus - f_minus) / (2 * eps)
                a = g_a[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), min_scale)
                worst = max(worst, err)
    return worst, skipped


def _pattern_changed(base, other) -> bool:
    if len(base) != len(other):
        return True
    return any(not np.array_equal(a, b) for a, b in zip(base, other))
