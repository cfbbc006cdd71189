"""Masked acoustic reconstruction through a Transformer encoder and a Gumbel-Softmax VQ bottleneck."""

__version__ = "0.1.0"
