"""Span masking, convolutional positional layer and the Transformer stack."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


@dataclass
class MaskConfig:
    span_length: int = 20
    mask_fraction: float = 0.40

    def __post_init__(self):
        if self.span_length < 1:
            raise ConfigError("span_length must be >= 1")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class MaskPlan:
    num_frames: int
    span_length: int
    starts: tuple[int, ...] = ()

    @property
    def indices(self) -> np.ndarray:
        if not self.starts:
            return np.zeros(0, dtype=np.int64)
        return (np.asarray(self.starts)[:, None] + np.arange(self.span_length)).reshape(-1)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_frames, dtype=bool)
        out[self.indices] = True
        return out

    @property
    def fraction(self) -> float:
        return len(self.starts) * self.span_length / self.num_frames


def plan_masks(num_frames: int, config: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    """Rejection-sample non-overlapping spans until the target fraction is covered.

    Candidates are uniform over [0, T - K].  A candidate overlapping an accepted
    span is rejected; sampling gives up after 10 * T rejections.
    """
    K = config.span_length
    if num_frames < K:
        raise DataError(f"sequence of {num_frames} frames is shorter than the span length {K}")
    taken = np.zeros(num_frames, dtype=bool)
    starts: list[int] = []
    rejected = 0
    while len(starts) * K / num_frames < config.mask_fraction and rejected < 10 * num_frames:
        s = int(rng.integers(0, num_frames - K + 1))
        if taken[s:s + K].any():
            rejected += 1
            continue
        taken[s:s + K] = True
        starts.append(s)
    return MaskPlan(num_frames, K, tuple(sorted(starts)))


def apply_masks(x: torch.Tensor, mask: torch.Tensor, mask_vector: torch.Tensor) -> torch.Tensor:
    """Replace frames where ``mask`` is true by ``mask_vector``.

    ``x`` is (..., T, F) and ``mask`` a boolean (..., T) tensor.
    """
    if mask_vector.shape != x.shape[-1:]:
        raise DataError(f"mask vector has shape {tuple(mask_vector.shape)}, features have dim {x.shape[-1]}")
    if mask.shape != x.shape[:-1]:
        raise DataError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:-1])}")
    return torch.where(mask.unsqueeze(-1), mask_vector.to(x.dtype), x)


@dataclass
class EncoderConfig:
    input_dim: int = 80
    model_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    conv_kernel: int = 15
    conv_groups: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.model_dim % self.conv_groups:
            raise ConfigError("conv_groups must divide model_dim")
        if self.conv_kernel < 1 or self.num_blocks < 0:
            raise ConfigError("conv_kernel must be >= 1 and num_blocks >= 0")

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls(80, 768, 12, 8, 3072, 256, 16, 0.1)

    @classmethod
    def desk(cls) -> "EncoderConfig":
        return cls(80, 64, 2, 4, 256, 15, 4, 0.1)


class ConvPositional(nn.Module):
    """Linear projection to the model width, then LN(h + GELU(grouped_conv(h)))."""

    def __init__(self, input_dim: int, model_dim: int, kernel: int, groups: int):
        super().__init__()
        self.proj = nn.Linear(input_dim, model_dim)
        self.conv = nn.Conv1d(model_dim, model_dim, kernel, groups=groups)
        # even kernels put the extra padding frame on the left
        self.pad = (kernel // 2, kernel - 1 - kernel // 2)
        self.norm = nn.LayerNorm(model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] == 0:
            raise DataError("cannot encode an empty sequence")
        h = self.proj(x)
        c = self.conv(F.pad(h.transpose(-1, -2), self.pad)).transpose(-1, -2)
        return self.norm(h + F.gelu(c))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        *lead, T, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.reshape(*lead, T, self.num_heads, self.head_dim).transpose(-2, -3) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = scores.softmax(dim=-1)
        ctx = weights @ v
        out = self.out(ctx.transpose(-2, -3).reshape(*lead, T, D))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, inner: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, inner)
        self.fc2 = nn.Linear(inner, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.dropout(self.attn(self.attn_norm(x)))
        return x + self.dropout(self.ffn(self.ffn_norm(x)))


class Encoder(nn.Module):
    """Masked features (..., T, F) -> latent sequence z (..., T, d)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.positional = ConvPositional(config.input_dim, config.model_dim, config.conv_kernel, config.conv_groups)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.model_dim, config.num_heads, config.ffn_dim, config.dropout)
            for _ in range(config.num_blocks)
        )
        self.final_norm = nn.LayerNorm(config.model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.input_dim:
            raise DataError(f"encoder expects {self.config.input_dim}-dim features, got {x.shape[-1]}")
        h = self.positional(x)
        for block in self.blocks:
            h = block(h)
        return self.final_norm(h)
