"""Reverse-mode gradients, Adam, clipping and the two training schedules.

Arrays are ``torch.Tensor``; torch's autograd records the graph.  This module
owns the contracts layered on top: scalar-root backward with zero-filled
unreachable parameters, an explicit Adam state that can be serialized blob by
blob, deterministic global-norm clipping, and a finite-difference oracle used
by the gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericalError

Tensor = torch.Tensor


def backward(root: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Populate ``.grad`` of every parameter with d(root)/d(param).

    Parameters that ``root`` does not depend on receive an all-zero gradient.
    Existing ``.grad`` buffers are overwritten, not accumulated into.
    """
    if root.numel() != 1 or root.dim() != 0:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if not root.requires_grad:
        raise ValueError("root was not produced by a recorded computation")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(root, tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        p.grad = g
        out[name] = g
    return out


@dataclass
class AdamState:
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.exp_avg[name] = torch.zeros_like(p, memory_format=torch.contiguous_format)
            state.exp_avg_sq[name] = torch.zeros_like(p, memory_format=torch.contiguous_format)
        return state


@torch.no_grad()
def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    for name in sorted(params):
        p, g = params[name], grads[name]
        if g.shape != p.shape or state.exp_avg[name].shape != p.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: param {tuple(p.shape)}, grad {tuple(g.shape)}, "
                f"moment {tuple(state.exp_avg[name].shape)}"
            )
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NumericalError(f"non-finite gradient in parameter {name!r} ({bad} entries)")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in sorted(params):
        p, g = params[name], grads[name]
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if lr == 0.0:
            continue
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
    return state


@torch.no_grad()
def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  Reduction order is fixed (sorted names).
    """
    total = 0.0
    for name in sorted(grads):
        total += float(grads[name].double().pow(2).sum())
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NumericalError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for name in sorted(grads):
            grads[name].mul_(scale)
    return norm


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    peak_lr: float
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 1 or self.peak_lr <= 0 or self.total_steps <= self.warmup_steps:
            raise ConfigError(f"invalid learning-rate schedule {self}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup 0 -> peak, then linear decay to 0 at ``total_steps``."""
    if step <= 0:
        return 0.0
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return 0.0
    remaining = schedule.total_steps - step
    return schedule.peak_lr * remaining / (schedule.total_steps - schedule.warmup_steps)


@dataclass(frozen=True)
class TemperatureSchedule:
    start: float = 2.0
    floor: float = 0.5
    decay: float = 0.999995

    def __post_init__(self):
        if self.start <= 0 or self.floor <= 0 or not 0 < self.decay < 1:
            raise ConfigError(f"invalid temperature schedule {self}")


def temperature_at(schedule: TemperatureSchedule, step: int) -> float:
    return max(schedule.floor, schedule.start * schedule.decay**step)


# --- finite-difference oracle ------------------------------------------------


def finite_difference(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    h: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected flat entries of ``tensor``.

    ``tensor`` is perturbed in place and restored; autograd is not consulted.
    """
    flat = tensor.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            out[k] = (plus - minus) / (2 * h)
    return out


def gradient_error(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-4,
    max_entries: int | None = 48,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error between autograd and central differences, per tensor.

    The error of a tensor is max|analytic - numeric| / max(max|numeric|, 1e-8)
    over the checked entries (all of them, or a random sample of
    ``max_entries``).
    """
    rng = rng or np.random.default_rng(0)
    names = list(tensors)
    root = fn()
    grads = torch.autograd.grad(root, [tensors[n] for n in names], allow_unused=True)
    errors = {}
    for name, g in zip(names, grads):
        t = tensors[name]
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        if max_entries is None or n <= max_entries:
            idx = list(range(n))
        else:
            idx = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        numeric = finite_difference(fn, t, h=h, indices=idx)
        analytic = g.detach().reshape(-1)[idx].double().numpy()
        scale = max(float(np.abs(numeric).max(initial=0.0)), 1e-8)
        errors[name] = float(np.abs(analytic - numeric).max(initial=0.0)) / scale
    return errors
