"""Finite-difference gradient checks for every differentiable building block.

Each check builds a small float64 instance from a seed, reduces the op's
output to a scalar with a fixed random projection, and compares autograd with
central differences (``core.gradient_error``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import core
from .encoder import ConvPositional, Encoder, EncoderConfig, FeedForward, MultiHeadSelfAttention, TransformerBlock, apply_masks
from .objectives import ReconstructionHead, diversity_loss, recon_loss
from .quantizer import CodebookConfig, GumbelQuantizer, sample_gumbel

TOLERANCE = 1e-5


def _project(out: torch.Tensor, seed: int) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.from_numpy(np.random.default_rng([seed, 99]).standard_normal(tuple(out.shape)))
    return lambda y: (y * w).sum()


def _module_case(module: torch.nn.Module, x: torch.Tensor, seed: int, call=None):
    module = module.double()
    call = call or module
    x = x.double().requires_grad_(True)
    proj = _project(call(x).detach(), seed)
    tensors = {"input": x, **dict(module.named_parameters())}
    return (lambda: proj(call(x))), tensors


def _randn(seed, *shape):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


def case_projection(seed):
    torch.manual_seed(seed)
    return _module_case(torch.nn.Linear(5, 4), _randn(seed, 2, 6, 5), seed)


def case_mask(seed):
    rng = np.random.default_rng(seed)
    x = _randn(seed, 2, 7, 3).requires_grad_(True)
    vec = torch.from_numpy(rng.standard_normal(3)).requires_grad_(True)
    mask = torch.from_numpy(rng.random((2, 7)) < 0.4)
    proj = _project(x, seed)
    return (lambda: proj(apply_masks(x, mask, vec))), {"input": x, "mask_vector": vec}


def case_conv_positional(seed):
    torch.manual_seed(seed)
    return _module_case(ConvPositional(5, 8, kernel=4, groups=2), _randn(seed, 1, 9, 5), seed)


def case_attention(seed):
    torch.manual_seed(seed)
    return _module_case(MultiHeadSelfAttention(8, 2), _randn(seed, 1, 6, 8), seed)


def case_ffn(seed):
    torch.manual_seed(seed)
    return _module_case(FeedForward(6, 12), _randn(seed, 2, 5, 6), seed)


def case_transformer_block(seed):
    torch.manual_seed(seed)
    return _module_case(TransformerBlock(8, 2, 16), _randn(seed, 1, 6, 8), seed)


def case_encoder(seed):
    torch.manual_seed(seed)
    cfg = EncoderConfig(input_dim=6, model_dim=16, num_blocks=2, num_heads=4, ffn_dim=32,
                        conv_kernel=5, conv_groups=4, dropout=0.0)
    return _module_case(Encoder(cfg), _randn(seed, 1, 10, 6), seed)


def case_soft_quantizer(seed):
    torch.manual_seed(seed)
    q = GumbelQuantizer(8, CodebookConfig(num_codebooks=2, codebook_size=4)).double()
    noise = torch.from_numpy(sample_gumbel((5, 2, 4), np.random.default_rng(seed)))
    return _module_case(q, _randn(seed, 5, 8), seed, call=lambda z: q(z, 0.7, noise, soft=True).quantized)


def case_reconstruction_head(seed):
    torch.manual_seed(seed)
    return _module_case(ReconstructionHead(8, 4), _randn(seed, 6, 8), seed)


def case_recon_loss(seed):
    target = _randn(seed, 6, 4)
    pred = _randn(seed + 1000, 6, 4).requires_grad_(True)
    return (lambda: recon_loss(target, pred)), {"prediction": pred}


def case_diversity_loss(seed):
    logits = _randn(seed, 7, 2, 5).requires_grad_(True)
    return (lambda: diversity_loss(logits.softmax(-1))), {"logits": logits}


CASES: dict[str, Callable] = {
    "projection": case_projection,
    "mask": case_mask,
    "conv_positional": case_conv_positional,
    "attention": case_attention,
    "ffn": case_ffn,
    "transformer_block": case_transformer_block,
    "encoder": case_encoder,
    "soft_quantizer": case_soft_quantizer,
    "reconstruction_head": case_reconstruction_head,
    "recon_loss": case_recon_loss,
    "diversity_loss": case_diversity_loss,
}


@dataclass
class CheckResult:
    op: str
    instances: int
    max_error: float
    worst_tensor: str

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_check(op: str, instances: int = 5, max_entries: int = 48) -> CheckResult:
    if op not in CASES:
        raise KeyError(f"unknown op {op!r}; choose from {sorted(CASES)}")
    worst, worst_name = 0.0, ""
    for seed in range(instances):
        fn, tensors = CASES[op](seed)
        errors = core.gradient_error(fn, tensors, h=1e-4, max_entries=max_entries,
                                     rng=np.random.default_rng(seed))
        for name, err in errors.items():
            if err >= worst:
                worst, worst_name = err, name
    return CheckResult(op, instances, worst, worst_name)
