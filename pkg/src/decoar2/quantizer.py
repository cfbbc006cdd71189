"""Multi-codebook Gumbel-Softmax vector quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError


@dataclass
class CodebookConfig:
    num_codebooks: int = 2
    codebook_size: int = 320
    entry_dim: int | None = None  # defaults to model_dim // num_codebooks

    def __post_init__(self):
        if self.num_codebooks < 1 or self.codebook_size < 2:
            raise ConfigError("need num_codebooks >= 1 and codebook_size >= 2")


@dataclass
class QuantizationOutput:
    probs: torch.Tensor  # (..., G, V)
    indices: torch.Tensor  # (..., G)
    quantized: torch.Tensor  # (..., d)
    temperature: float | None = None


def gumbel_noise(u):
    """-ln(-ln(u)) for u strictly inside (0, 1); floats, arrays or tensors."""
    if isinstance(u, torch.Tensor):
        if not bool(((u > 0) & (u < 1)).all()):
            raise ValueError("gumbel_noise needs 0 < u < 1")
        return -torch.log(-torch.log(u))
    arr = np.asarray(u, dtype=np.float64)
    if not ((arr > 0) & (arr < 1)).all():
        raise ValueError("gumbel_noise needs 0 < u < 1")
    out = -np.log(-np.log(arr))
    return float(out) if np.ndim(u) == 0 else out


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    # random() is a multiple of 2**-53 in [0, 1); the half-step offset keeps u off both ends
    u = rng.random(shape) + 2.0**-54
    return gumbel_noise(u)


def gumbel_softmax_probs(logits: torch.Tensor, noise: torch.Tensor, tau: float) -> torch.Tensor:
    """softmax((logits + noise) / tau) over the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    y = (logits + noise) / tau
    y = y - y.amax(dim=-1, keepdim=True).detach()
    e = y.exp()
    return e / e.sum(dim=-1, keepdim=True)


def codebook_perplexity(avg_probs) -> np.ndarray:
    """exp(entropy) per codebook row of a (G, V) averaged distribution."""
    p = avg_probs.detach().double().cpu().numpy() if isinstance(avg_probs, torch.Tensor) else np.asarray(avg_probs, dtype=np.float64)
    p = np.atleast_2d(p)
    if (p < 0).any() or np.abs(p.sum(-1) - 1.0).max() > 1e-6:
        raise ValueError("each averaged distribution must be non-negative and sum to 1")
    logp = np.log(np.where(p > 0, p, 1.0))
    return np.exp(-(p * logp).sum(-1))


class GumbelQuantizer(nn.Module):
    """Logits from z, one entry per codebook, concatenated and projected back to d.

    Training uses straight-through Gumbel-Softmax: the forward value is the hard
    selection, gradients flow through the soft probabilities.  ``soft=True``
    returns the soft mixture instead (the surrogate the gradient is taken of).
    """

    def __init__(self, model_dim: int, config: CodebookConfig):
        super().__init__()
        self.G = config.num_codebooks
        self.V = config.codebook_size
        self.entry_dim = config.entry_dim or model_dim // self.G
        self.logits = nn.Linear(model_dim, self.G * self.V)
        self.entries = nn.Parameter(torch.empty(self.G, self.V, self.entry_dim))
        self.output = nn.Linear(self.G * self.entry_dim, model_dim)
        # unit-variance logit weights: with layer-normed inputs the logits start on the
        # scale of the Gumbel noise or above, so hard selection is not pure noise at step 0
        nn.init.normal_(self.logits.weight, mean=0.0, std=1.0)
        nn.init.zeros_(self.logits.bias)
        nn.init.uniform_(self.entries)

    def compute_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.logits(z).unflatten(-1, (self.G, self.V))

    def _project(self, selection: torch.Tensor) -> torch.Tensor:
        picked = torch.einsum("...gv,gvc->...gc", selection, self.entries)
        return self.output(picked.flatten(-2))

    def forward(self, z: torch.Tensor, tau: float, noise: torch.Tensor, soft: bool = False) -> QuantizationOutput:
        logits = self.compute_logits(z)
        if noise.shape != logits.shape:
            raise DataError(f"noise shape {tuple(noise.shape)} != logits shape {tuple(logits.shape)}")
        probs = gumbel_softmax_probs(logits, noise.to(logits.dtype), tau)
        indices = probs.argmax(dim=-1)
        if soft:
            selection = probs
        else:
            hard = torch.zeros_like(probs).scatter_(-1, indices.unsqueeze(-1), 1.0)
            selection = hard + (probs - probs.detach())
        return QuantizationOutput(probs, indices, self._project(selection), tau)

    def inference(self, z: torch.Tensor) -> QuantizationOutput:
        """Noise-free argmax of the raw logits; ties resolve to the lowest index."""
        logits = self.compute_logits(z)
        indices = logits.argmax(dim=-1)
        hard = torch.zeros_like(logits).scatter_(-1, indices.unsqueeze(-1), 1.0)
        return QuantizationOutput(logits.softmax(-1), indices, self._project(hard), None)


def quantize_train(z, quantizer: GumbelQuantizer, tau: float, rng: np.random.Generator) -> QuantizationOutput:
    noise = torch.from_numpy(sample_gumbel((*z.shape[:-1], quantizer.G, quantizer.V), rng))
    return quantizer(z, tau, noise.to(z.dtype))


def quantize_inference(z, quantizer: GumbelQuantizer) -> QuantizationOutput:
    return quantizer.inference(z)
