"""The full network: trainable mask vector, encoder, quantizer, reconstruction head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import Encoder, EncoderConfig, apply_masks
from .objectives import ReconstructionHead
from .quantizer import CodebookConfig, GumbelQuantizer, QuantizationOutput


@dataclass
class ForwardOutput:
    pred: torch.Tensor  # (N, F) reconstructions at masked positions
    target: torch.Tensor  # (N, F) original frames at masked positions
    quant: QuantizationOutput | None  # over all positions
    masked_probs: torch.Tensor | None  # (N, G, V)


class DeCoAR2(nn.Module):
    def __init__(self, encoder: EncoderConfig, codebook: CodebookConfig, use_vq: bool = True):
        super().__init__()
        self.mask_vector = nn.Parameter(torch.empty(encoder.input_dim).uniform_())
        self.encoder = Encoder(encoder)
        self.quantizer = GumbelQuantizer(encoder.model_dim, codebook) if use_vq else None
        self.head = ReconstructionHead(encoder.model_dim, encoder.input_dim)

    @property
    def use_vq(self) -> bool:
        return self.quantizer is not None

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Frozen-use path: no masking, no quantization."""
        return self.encoder(x)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        tau: float | None = None,
        noise: torch.Tensor | None = None,
    ) -> ForwardOutput:
        """``x`` (B, T, F), boolean ``mask`` (B, T).

        With ``noise`` the quantizer takes the straight-through Gumbel path at
        temperature ``tau``; without it, the deterministic argmax path.
        """
        z = self.encoder(apply_masks(x, mask, self.mask_vector))
        quant = None
        if self.quantizer is not None:
            quant = self.quantizer.inference(z) if noise is None else self.quantizer(z, tau, noise)
            v = quant.quantized
        else:
            v = z
        pred = self.head(v[mask])
        masked_probs = quant.probs[mask] if quant is not None else None
        return ForwardOutput(pred, x[mask], quant, masked_probs)
