"""Framewise linear probe on frozen (or raw) features."""
from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import core
from .errors import DataError


@dataclass
class ProbeReport:
    accuracy: float
    confusion: np.ndarray  # (U, U): rows true unit, columns predicted unit
    num_units: int
    train_frames: int
    heldout_frames: int
    steps: int
    final_loss: float
    seed: int
    feature_hash: str
    perplexities: list[float] | None = None
    purity: float | None = None
    notes: dict = field(default_factory=dict)

    def unit_counts(self) -> np.ndarray:
        return self.confusion.sum(1)


def split_utterances(utterance_ids: Sequence[str], heldout_fraction: float = 0.2, seed: int = 0):
    """Deterministic utterance-level split; returns (train_ids, heldout_ids)."""
    ids = sorted(utterance_ids)
    if len(ids) < 2:
        raise DataError("need at least two utterances to split")
    perm = np.random.default_rng([seed, 7]).permutation(len(ids))
    n_held = min(max(1, int(round(heldout_fraction * len(ids)))), len(ids) - 1)
    held = {ids[i] for i in perm[:n_held]}
    return [u for u in ids if u not in held], [u for u in ids if u in held]


def _hash_arrays(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def train_probe(
    features: dict[str, np.ndarray],
    labels: dict[str, np.ndarray],
    num_units: int | None = None,
    heldout_fraction: float = 0.2,
    seed: int = 0,
    lr: float = 0.05,
    max_steps: int = 3000,
    tol: float = 1e-5,
    patience: int = 100,
) -> ProbeReport:
    """Multinomial logistic regression per frame, full-batch Adam.

    Stops once the training loss improves by less than ``tol`` over
    ``patience`` steps, or at ``max_steps``.  Inputs are standardized with
    training-split statistics.
    """
    if set(features) != set(labels):
        missing = sorted(set(features) ^ set(labels))
        raise DataError(f"features and labels cover different utterances, e.g. {missing[:3]}")
    for utt in features:
        if len(features[utt]) != len(labels[utt]):
            raise DataError(f"{utt}: {len(features[utt])} feature frames vs {len(labels[utt])} labels")
    all_labels = np.concatenate([labels[u] for u in sorted(labels)])
    if num_units is None:
        num_units = int(all_labels.max()) + 1
    if all_labels.min() < 0 or all_labels.max() >= num_units:
        raise DataError(f"labels must lie in [0, {num_units})")

    train_ids, held_ids = split_utterances(list(features), heldout_fraction, seed)
    xtr = np.concatenate([features[u] for u in train_ids]).astype(np.float64)
    ytr = np.concatenate([labels[u] for u in train_ids])
    xte = np.concatenate([features[u] for u in held_ids]).astype(np.float64)
    yte = np.concatenate([labels[u] for u in held_ids])
    mean, std = xtr.mean(0), xtr.std(0) + 1e-8
    xtr_t = torch.from_numpy((xtr - mean) / std)
    xte_t = torch.from_numpy((xte - mean) / std)
    ytr_t = torch.from_numpy(ytr)

    params = {
        "weight": torch.zeros(xtr.shape[1], num_units, dtype=torch.float64, requires_grad=True),
        "bias": torch.zeros(num_units, dtype=torch.float64, requires_grad=True),
    }
    adam = core.AdamState.for_params(params)
    history = []
    step = 0
    for step in range(1, max_steps + 1):
        loss = torch.nn.functional.cross_entropy(xtr_t @ params["weight"] + params["bias"], ytr_t)
        grads = core.backward(loss, params)
        core.adam_step(params, grads, adam, lr)
        history.append(float(loss.detach()))
        if len(history) > patience and history[-patience - 1] - history[-1] < tol:
            break

    with torch.no_grad():
        pred = (xte_t @ params["weight"] + params["bias"]).argmax(1).numpy()
    confusion = np.zeros((num_units, num_units), dtype=np.int64)
    np.add.at(confusion, (yte, pred), 1)
    return ProbeReport(
        accuracy=float((pred == yte).mean()),
        confusion=confusion,
        num_units=num_units,
        train_frames=len(ytr),
        heldout_frames=len(yte),
        steps=step,
        final_loss=history[-1],
        seed=seed,
        feature_hash=_hash_arrays(features[u] for u in sorted(features)),
    )


def cluster_purity(codes: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of frames whose label is the majority label of their code.

    ``codes`` is (N, G); the tuple of G indices is one cluster.
    """
    codes = np.asarray(codes).reshape(len(labels), -1)
    per_code: dict[tuple, Counter] = {}
    for code, lab in zip(map(tuple, codes), labels):
        per_code.setdefault(code, Counter())[int(lab)] += 1
    if not per_code:
        return 0.0
    return sum(c.most_common(1)[0][1] for c in per_code.values()) / len(labels)


def write_probe_report(report: ProbeReport, path) -> tuple[Path, Path]:
    """CSV (one row per unit) plus a text summary next to it."""
    path = Path(path)
    U = report.num_units
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "frames", "correct", "accuracy"] + [f"pred_{j}" for j in range(U)])
        for u in range(U):
            row = report.confusion[u]
            n = int(row.sum())
            w.writerow([u, n, int(row[u]), f"{row[u] / n:.6f}" if n else ""] + [int(c) for c in row])
    summary = path.with_suffix(".txt")
    lines = [
        f"held-out frame accuracy: {report.accuracy:.4f}",
        f"units: {U}  train frames: {report.train_frames}  held-out frames: {report.heldout_frames}",
        f"probe steps: {report.steps}  final train loss: {report.final_loss:.5f}",
        f"seed: {report.seed}  feature hash: {report.feature_hash}",
    ]
    if report.perplexities is not None:
        lines.append("codebook perplexities: " + ", ".join(f"{p:.2f}" for p in report.perplexities))
    if report.purity is not None:
        lines.append(f"code cluster purity: {report.purity:.4f}")
    for k, v in report.notes.items():
        lines.append(f"{k}: {v}")
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path, summary
