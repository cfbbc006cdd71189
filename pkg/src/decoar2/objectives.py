"""Reconstruction head and the training loss: masked L1 plus codebook diversity."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericalError

Scalar = Union[float, torch.Tensor]


class ReconstructionHead(nn.Module):
    """d -> d -> F feed-forward network with a GELU in between."""

    def __init__(self, model_dim: int, feature_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(model_dim, model_dim)
        self.fc2 = nn.Linear(model_dim, feature_dim)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(v)))


def reconstruct(v: torch.Tensor, head: ReconstructionHead) -> torch.Tensor:
    """Predict one feature frame per masked position; ``v`` is (N, d)."""
    if v.shape[0] == 0:
        warnings.warn("no masked positions to reconstruct", RuntimeWarning, stacklevel=2)
        return v.new_zeros((0, head.fc2.out_features))
    return head(v)


def recon_loss(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked positions and feature coordinates."""
    if target.shape != pred.shape:
        raise DataError(f"target {tuple(target.shape)} and prediction {tuple(pred.shape)} differ")
    if target.numel() == 0:
        raise DataError("empty masked set")
    return (target - pred).abs().mean()


def diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """(GV - sum_g exp(H(mean_n p[n, g]))) / GV for probabilities shaped (N, G, V)."""
    if probs.dim() != 3 or probs.shape[0] == 0:
        raise DataError(f"expected (N>0, G, V) probabilities, got {tuple(probs.shape)}")
    _, G, V = probs.shape
    avg = probs.mean(dim=0)
    # 0 * log 0 := 0; the clamp only matters for exactly-zero entries
    entropy = -(avg * avg.clamp_min(1e-30).log()).sum(-1)
    return (G * V - entropy.exp().sum()) / (G * V)


@dataclass
class LossConfig:
    alpha: float = 0.1

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("alpha must be non-negative")


@dataclass
class LossBreakdown:
    recon: Scalar
    diversity: Scalar | None
    alpha: float
    total: Scalar
    # recon * recon_count gives back the raw sum of absolute errors
    recon_count: int = 1

    def floats(self) -> dict[str, float | None]:
        f = lambda x: None if x is None else _item(x)
        return {"recon": f(self.recon), "diversity": f(self.diversity), "alpha": self.alpha, "total": f(self.total)}


def _item(x: Scalar) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(recon: Scalar, diversity: Scalar | None, config: LossConfig, recon_count: int = 1) -> LossBreakdown:
    """recon + alpha * diversity.  ``diversity=None`` (no quantizer) contributes nothing."""
    for name, value in (("recon", recon), ("diversity", diversity)):
        if value is not None and not math.isfinite(_item(value)):
            raise NumericalError(f"{name} loss is not finite ({_item(value)})")
    total = recon if diversity is None else recon + config.alpha * diversity
    return LossBreakdown(recon, diversity, config.alpha, total, recon_count)
