"""Pretraining loop, held-out evaluation and frozen-encoder extraction.

All randomness is derived from ``(rng_seed, stream, step)``: a step's batch,
masks, Gumbel noise and dropout never depend on how many steps ran before it
in this process, which is what makes checkpoint resume exact.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import core
from .config import TrainConfig
from .errors import DataError, NumericalError
from .features import FeatureSequence
from .model import DeCoAR2
from .objectives import LossBreakdown, diversity_loss, recon_loss, total_loss
from .encoder import apply_masks, plan_masks
from .quantizer import codebook_perplexity, gumbel_softmax_probs, sample_gumbel

log = logging.getLogger(__name__)

STREAMS = {"init": 0, "batch": 1, "mask": 2, "gumbel": 3, "dropout": 4, "eval_mask": 5, "eval_gumbel": 6}

TRACE_FIELDS = ["step", "total", "recon", "diversity", "tau", "lr", "grad_norm", "perplexity"]


def stream(seed: int, name: str, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], counter])


def torch_seed(seed: int, name: str, counter: int) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name], counter]).generate_state(1, np.uint64)[0] >> 1)


def build_model(config: TrainConfig) -> DeCoAR2:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(config.rng_seed, "init", 0))
        return DeCoAR2(config.encoder, config.codebook, use_vq=config.use_vq)


class LengthGroupedBatches:
    """Sort by length, cut into contiguous groups, shuffle group order per epoch."""

    def __init__(self, lengths: Sequence[int], batch_size: int, seed: int):
        order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
        self.groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        self.seed = seed

    def __len__(self):
        return len(self.groups)

    def batch(self, step: int) -> list[int]:
        epoch, pos = divmod(step, len(self.groups))
        perm = stream(self.seed, "batch", epoch).permutation(len(self.groups))
        return self.groups[perm[pos]]


def collate(sequences: Sequence[FeatureSequence], max_frames: int) -> torch.Tensor:
    """Right-truncate every member to the shortest (capped at ``max_frames``) and stack."""
    T = min(min(s.num_frames for s in sequences), max_frames)
    return torch.from_numpy(np.stack([s.frames[:T] for s in sequences])).float()


def masks_for(batch_size: int, num_frames: int, config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    plans = [plan_masks(num_frames, config.mask, rng) for _ in range(batch_size)]
    return torch.from_numpy(np.stack([p.as_bool() for p in plans]))


@dataclass
class TrainState:
    config: TrainConfig
    model: DeCoAR2
    adam: core.AdamState
    step: int = 0

    def params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())


def init_state(config: TrainConfig) -> TrainState:
    model = build_model(config)
    return TrainState(config, model, core.AdamState.for_params(dict(model.named_parameters())))


@dataclass
class PretrainResult:
    state: TrainState
    trace: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


def compute_loss(model: DeCoAR2, x, mask, tau, noise, config: TrainConfig) -> tuple[LossBreakdown, torch.Tensor | None]:
    out = model(x, mask, tau, noise)
    rec = recon_loss(out.target, out.pred)
    div = diversity_loss(out.masked_probs) if out.masked_probs is not None else None
    breakdown = total_loss(rec, div, config.loss, recon_count=out.target.numel())
    return breakdown, out.masked_probs


def train_step(state: TrainState, corpus: Sequence[FeatureSequence], batches: LengthGroupedBatches) -> dict:
    config, model, step = state.config, state.model, state.step
    seed = config.rng_seed
    members = [corpus[i] for i in batches.batch(step)]
    x = collate(members, config.max_frames)
    B, T, _ = x.shape
    mask = masks_for(B, T, config, stream(seed, "mask", step))
    tau = core.temperature_at(config.temperature, step)
    lr = core.lr_at(config.lr_schedule, step)
    noise = None
    if model.use_vq:
        G, V = model.quantizer.G, model.quantizer.V
        noise = torch.from_numpy(sample_gumbel((B, T, G, V), stream(seed, "gumbel", step))).float()

    model.train()
    params = state.params()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_seed(seed, "dropout", step))
        try:
            breakdown, probs = compute_loss(model, x, mask, tau, noise, config)
        except NumericalError as exc:
            raise NumericalError(f"step {step}: {exc}") from exc
    grads = core.backward(breakdown.total, params)
    try:
        grad_norm = core.clip_grad_norm(grads, config.grad_clip)
        core.adam_step(params, grads, state.adam, lr)
    except NumericalError as exc:
        raise NumericalError(f"step {step}: {exc} (loss {breakdown.floats()})") from exc
    state.step += 1

    row = {"step": step, **breakdown.floats(), "tau": tau, "lr": lr, "grad_norm": grad_norm}
    del row["alpha"]
    if probs is not None:
        row["perplexity"] = float(codebook_perplexity(probs.detach().mean(0)).mean())
    else:
        row["perplexity"] = None
    return row


def pretrain(
    config: TrainConfig,
    corpus: Sequence[FeatureSequence],
    heldout: Sequence[FeatureSequence] = (),
    state: TrainState | None = None,
    stop_at: int | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
    eval_interval: int = 0,
) -> PretrainResult:
    """Train from ``state`` (or a fresh init) until ``stop_at`` / ``total_steps``.

    Held-out masked reconstruction is measured before the first step and at the
    end (and every ``eval_interval`` steps when positive).
    """
    if not corpus:
        raise DataError("empty training corpus")
    K = config.mask.span_length
    short = [s.utterance_id for s in corpus if s.num_frames < K]
    if short:
        raise DataError(f"{len(short)} utterances shorter than the span length {K}, e.g. {short[0]}")
    state = state or init_state(config)
    batches = LengthGroupedBatches([s.num_frames for s in corpus], config.batch_size, config.rng_seed)
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    result = PretrainResult(state)
    if heldout:
        result.evals.append({"step": state.step, **evaluate(state.model, heldout, config)})
    while state.step < end:
        row = train_step(state, corpus, batches)
        result.trace.append(row)
        if row["step"] % 100 == 0:
            log.info("step %d total %.4f recon %.4f tau %.3f lr %.2e", row["step"], row["total"], row["recon"], row["tau"], row["lr"])
        if eval_interval and heldout and state.step % eval_interval == 0 and state.step < end:
            result.evals.append({"step": state.step, **evaluate(state.model, heldout, config)})
        if on_checkpoint and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
            on_checkpoint(state)
    if heldout and (not result.evals or result.evals[-1]["step"] != state.step):
        result.evals.append({"step": state.step, **evaluate(state.model, heldout, config)})
    return result


@torch.no_grad()
def evaluate(model: DeCoAR2, sequences: Sequence[FeatureSequence], config: TrainConfig, tau: float | None = None) -> dict:
    """Deterministic held-out metrics.

    ``recon``: masked-frame L1 (pooled mean) through the argmax quantizer.
    ``perplexity``: mean over codebooks of exp(entropy) of the Gumbel-Softmax
    probabilities averaged over masked positions, at temperature ``tau``
    (default: the schedule's floor-clamped value at ``total_steps``).
    ``code_perplexity``: the same for hard argmax code usage.
    """
    model.eval()
    tau = core.temperature_at(config.temperature, config.total_steps) if tau is None else tau
    abs_sum, count = 0.0, 0
    prob_sum, hard_sum, n_masked = None, None, 0
    for i, seq in enumerate(sequences):
        T = min(seq.num_frames, config.max_frames)
        x = torch.from_numpy(seq.frames[:T]).float().unsqueeze(0)
        mask = masks_for(1, T, config, stream(config.rng_seed, "eval_mask", i))
        z = model.encoder(apply_masks(x, mask, model.mask_vector))
        if model.use_vq:
            quant = model.quantizer.inference(z)
            v = quant.quantized
        else:
            v = z
        pred = model.head(v[mask])
        abs_sum += float((x[mask] - pred).abs().double().sum())
        count += pred.numel()
        if model.use_vq:
            V = model.quantizer.V
            logits = model.quantizer.compute_logits(z[mask])
            noise = sample_gumbel(tuple(logits.shape), stream(config.rng_seed, "eval_gumbel", i))
            probs = gumbel_softmax_probs(logits, torch.from_numpy(noise).float(), tau).double()
            hard = torch.nn.functional.one_hot(quant.indices[mask], V).double()
            prob_sum = probs.sum(0) if prob_sum is None else prob_sum + probs.sum(0)
            hard_sum = hard.sum(0) if hard_sum is None else hard_sum + hard.sum(0)
            n_masked += probs.shape[0]
    metrics = {"recon": abs_sum / count, "perplexity": None, "code_perplexity": None}
    if prob_sum is not None:
        metrics["perplexity"] = float(codebook_perplexity(prob_sum / n_masked).mean())
        metrics["code_perplexity"] = float(codebook_perplexity(hard_sum / n_masked).mean())
    return metrics


@torch.no_grad()
def extract(model: DeCoAR2, sequences: Sequence[FeatureSequence]) -> list[FeatureSequence]:
    """Latent sequences z from the frozen encoder (no masking, no quantizer)."""
    model.eval()
    out = []
    for seq in sequences:
        if seq.dim != model.encoder.config.input_dim:
            raise DataError(
                f"{seq.utterance_id}: features have dim {seq.dim}, model expects {model.encoder.config.input_dim}"
            )
        z = model.encode(torch.from_numpy(seq.frames).float().unsqueeze(0))[0]
        out.append(replace(seq, frames=z.numpy().astype(np.float32), labels=None))
    return out


@torch.no_grad()
def hard_codes(model: DeCoAR2, sequences: Sequence[FeatureSequence]) -> list[np.ndarray]:
    """Argmax code indices (T, G) per utterance on unmasked input."""
    if not model.use_vq:
        raise DataError("model has no quantizer")
    model.eval()
    return [
        model.quantizer.inference(model.encode(torch.from_numpy(s.frames).float().unsqueeze(0))).indices[0].numpy()
        for s in sequences
    ]


def write_trace(trace: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in TRACE_FIELDS})
