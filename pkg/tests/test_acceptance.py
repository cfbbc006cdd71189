"""Acceptance suite: one block per criterion, summarized at the end of the run.

Criteria 6-8 share one ablation sweep (five seeds, three pretraining runs each)
on the default 200-utterance synthetic corpus; that fixture dominates the
runtime.
"""
import math
import time

import numpy as np
import pytest
import torch

from decoar2 import core
from decoar2.ablation import run_ablation
from decoar2.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from decoar2.config import TrainConfig
from decoar2.encoder import MaskConfig, plan_masks
from decoar2.errors import Decoar2Error
from decoar2.features import (
    SyntheticCorpusConfig,
    cmvn_per_speaker,
    features_from_bytes,
    features_to_bytes,
    generate_synthetic_corpus,
    read_features,
    write_features,
)
from decoar2.gradcheck import CASES, run_check
from decoar2.objectives import diversity_loss
from decoar2.probe import split_utterances
from decoar2.quantizer import gumbel_noise, gumbel_softmax_probs, sample_gumbel
from decoar2.training import pretrain

SEEDS = [0, 1, 2, 3, 4]
D = torch.float64


# --- 1. gradient integrity ---


@pytest.mark.criterion(1)
def test_gradient_integrity(detail):
    required = {"projection", "conv_positional", "attention", "ffn", "soft_quantizer",
                "reconstruction_head", "recon_loss", "diversity_loss"}
    assert required <= set(CASES)
    started = time.perf_counter()
    results = [run_check(op, instances=5) for op in CASES]
    elapsed = time.perf_counter() - started
    for r in results:
        detail(f"{r.op:20s} max rel err {r.max_error:.2e} over {r.instances} instances")
    detail(f"suite time {elapsed:.1f} s (limit 120 s)")
    assert all(r.instances >= 5 and r.max_error < 1e-5 for r in results)
    assert elapsed < 120


# --- 2. Gumbel-Softmax laws ---


@pytest.mark.criterion(2)
def test_gumbel_rows_normalized_and_shift_invariant(detail):
    rng = np.random.default_rng(0)
    worst_sum, worst_shift = 0.0, 0.0
    for _ in range(200):
        V = int(rng.integers(2, 400))
        tau = float(rng.uniform(0.05, 3.0))
        logits = torch.from_numpy(rng.standard_normal((4, V)) * rng.uniform(0.1, 20))
        noise = torch.from_numpy(sample_gumbel((4, V), rng))
        p = gumbel_softmax_probs(logits, noise, tau)
        q = gumbel_softmax_probs(logits + float(rng.uniform(-100, 100)), noise, tau)
        worst_sum = max(worst_sum, float((p.sum(-1) - 1).abs().max()))
        worst_shift = max(worst_shift, float((p - q).abs().max()))
    detail(f"max |row sum - 1| {worst_sum:.1e}; max shift deviation {worst_shift:.1e} (limit 1e-6)")
    assert worst_sum <= 1e-6 and worst_shift <= 1e-6


@pytest.mark.criterion(2)
def test_gumbel_low_temperature_concentrates(detail):
    rng = np.random.default_rng(1)
    worst = 1.0
    for _ in range(200):
        logits = torch.from_numpy(rng.standard_normal(320))
        noise = torch.from_numpy(sample_gumbel(320, rng))
        p = gumbel_softmax_probs(logits, noise, 1e-3)
        worst = min(worst, float(p[int(torch.argmax(logits + noise))]))
    detail(f"min argmax mass at tau=1e-3: {worst:.6f} (limit {1 - 1e-3})")
    assert worst >= 1 - 1e-3


@pytest.mark.criterion(2)
def test_gumbel_noise_values_and_mean(detail):
    a, b = gumbel_noise(math.exp(-1)), gumbel_noise(math.exp(-math.e))
    mean = float(sample_gumbel(10**6, np.random.default_rng(2)).mean())
    detail(f"g(e^-1)={a:.2e}, g(e^-e)={b:.15f}, mean of 1e6 draws {mean:.4f} (target 0.5772 +- 0.01)")
    assert abs(a) < 1e-12 and abs(b + 1) < 1e-12
    assert abs(mean - 0.5772) <= 0.01


# --- 3. diversity loss closed forms ---


@pytest.mark.criterion(3)
def test_diversity_closed_forms(detail):
    uniform = diversity_loss(torch.full((3, 2, 320), 1 / 320, dtype=D)).item()
    onehot = torch.zeros(3, 2, 320, dtype=D)
    onehot[..., 0] = 1
    peaked = diversity_loss(onehot).item()
    mixed = diversity_loss(torch.tensor([[[1, 0], [1, 0]], [[0, 1], [1, 0]]], dtype=D)).item()
    detail(f"uniform {uniform:.2e}, one-hot {peaked:.6f} (0.996875), G=2 V=2 mixed {mixed:.6f} (0.25)")
    assert abs(uniform) < 1e-9
    assert abs(peaked - 0.996875) < 1e-9
    assert abs(mixed - 0.25) < 1e-9


@pytest.mark.criterion(3)
def test_diversity_bounds(detail):
    rng = np.random.default_rng(3)
    lo, hi = math.inf, -math.inf
    for _ in range(10**4):
        V = int(rng.integers(2, 64))
        G = int(rng.integers(1, 4))
        conc = float(rng.choice([0.01, 0.1, 1.0, 10.0]))
        pbar = torch.from_numpy(rng.dirichlet(np.full(V, conc), size=(1, G)))
        val = diversity_loss(pbar).item()
        lo, hi = min(lo, val), max(hi, val - (V - 1) / V)
        assert -1e-12 <= val <= (V - 1) / V + 1e-12
    detail(f"10^4 draws: min value {lo:.2e}, max excess over (V-1)/V {hi:.2e}")


# --- 4. masking statistics ---


@pytest.mark.criterion(4)
def test_masking_statistics(detail):
    cfg = MaskConfig(span_length=20, mask_fraction=0.40)
    rng = np.random.default_rng(4)
    fractions = []
    for _ in range(1000):
        plan = plan_masks(5000, cfg, rng)
        starts = np.array(plan.starts)
        assert np.all(np.diff(starts) >= 20), "overlapping spans"
        assert np.all(starts + 20 <= 5000)
        covered = plan.as_bool()
        assert covered.sum() == 20 * len(starts)
        fractions.append(covered.mean())
    detail(f"fraction range [{min(fractions):.4f}, {max(fractions):.4f}] (limits [0.38, 0.42]), no overlaps")
    assert 0.38 <= min(fractions) and max(fractions) <= 0.42


# --- 5. schedules ---


@pytest.mark.criterion(5)
def test_lr_schedule_endpoints(detail):
    for warmup, peak, total in [(32000, 3e-4, 337500), (200, 2e-3, 2000), (1, 1.0, 2)]:
        s = core.LrSchedule(warmup, peak, total)
        values = (core.lr_at(s, 0), core.lr_at(s, warmup), core.lr_at(s, total))
        assert values == (0.0, peak, 0.0)
        detail(f"warmup {warmup}, total {total}: lr(0, warmup, total) = {values}")


@pytest.mark.criterion(5)
def test_temperature_first_floor_hit(detail):
    s = core.TemperatureSchedule(2.0, 0.5, 0.999995)
    assert core.temperature_at(s, 0) == 2.0
    analytic = math.ceil(math.log(0.5 / 2.0) / math.log(0.999995))
    step = 0
    while core.temperature_at(s, step) > 0.5:
        step += 1
    detail(f"tau(0)=2.0; first floor hit by iteration {step}, analytic {analytic}")
    assert step == analytic == 277259


# --- 6-8. desk-scale experiments ---


@pytest.fixture(scope="module")
def corpus():
    seqs = generate_synthetic_corpus(SyntheticCorpusConfig())
    assert len(seqs) == 200
    return cmvn_per_speaker(seqs)


@pytest.fixture(scope="module")
def ablation(corpus, tmp_path_factory):
    report = run_ablation(TrainConfig(), corpus, SEEDS)
    out = tmp_path_factory.mktemp("ablation") / "ablation.csv"
    report.write(out)
    report.paths = (out, out.with_suffix(".txt"))
    return report


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_end_to_end_training(ablation, corpus, detail):
    run = ablation.runs[(0, "vq")]
    initial, final = run.evals[0]["recon"], run.evals[-1]["recon"]
    seconds = ablation.seconds[(0, "vq")]
    detail(f"held-out masked recon {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f}, limit 0.60)")
    detail(f"wall clock {seconds:.0f} s for {len(run.trace)} steps (limit 900 s)")

    train_ids, _ = split_utterances([s.utterance_id for s in corpus], 0.2, 0)
    keep = set(train_ids)
    train = [s for s in corpus if s.utterance_id in keep]
    held = [s for s in corpus if s.utterance_id not in keep]
    again = pretrain(TrainConfig(rng_seed=0), train, held)
    identical = again.trace == run.trace
    detail(f"same-seed rerun trace bit-identical: {identical}")
    assert len(run.trace) == 2000
    assert identical
    assert seconds <= 900
    assert final <= 0.6 * initial


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_frozen_probe_beats_raw(ablation, detail):
    rows = ablation.by("vq")
    for r in rows:
        detail(f"seed {r['seed']}: frozen {r['probe_accuracy']:.4f} vs raw {r['raw_probe_accuracy']:.4f} "
               f"(margin {r['margin_vs_raw']:+.4f})")
    wins = sum(r["margin_vs_raw"] > 0 for r in rows)
    detail(f"frozen wins on {wins}/5 seeds (need >= 4)")
    assert len(rows) == 5
    assert wins >= 4


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_vq_ablation(ablation, detail):
    csv_path, txt_path = ablation.paths
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 1 + 2 * len(SEEDS) + 2
    assert "NOT reproduced" in txt_path.read_text()
    for r in ablation.by("no_vq"):
        assert r["final_diversity"] is None and r["perplexity"] is None
    rows = ablation.by("vq")
    for r in rows:
        detail(f"seed {r['seed']}: perplexity alpha=0.1 {r['perplexity']:.2f} vs alpha=0 {r['perplexity_alpha0']:.2f}; "
               f"probe vq {r['probe_accuracy']:.4f}")
    for r in ablation.by("no_vq"):
        detail(f"seed {r['seed']}: probe no-vq {r['probe_accuracy']:.4f}")
    wins = sum(r["perplexity"] > r["perplexity_alpha0"] for r in rows)
    detail(f"diversity term raises perplexity on {wins}/5 seeds (need >= 4)")
    assert wins >= 4


# --- 9. persistence ---


@pytest.mark.criterion(9)
def test_resume_is_bit_exact(corpus, tmp_path, detail):
    cfg = TrainConfig(total_steps=100, warmup_steps=20)
    subset = corpus[:40]
    full = pretrain(cfg, subset)
    first = pretrain(cfg, subset, stop_at=50)
    save_checkpoint(first.state, tmp_path / "step50.ckpt")
    resumed = pretrain(cfg, subset, state=load_checkpoint(tmp_path / "step50.ckpt"))
    same = first.trace + resumed.trace == full.trace
    same_state = checkpoint_bytes(resumed.state) == checkpoint_bytes(full.state)
    detail(f"resume at step 50 of 100: trace identical {same}, final state identical {same_state}")
    assert same and same_state


@pytest.mark.criterion(9)
def test_feature_file_round_trip(corpus, tmp_path, detail):
    for seq in corpus[:20]:
        path = tmp_path / f"{seq.utterance_id}.dc2f"
        write_features(seq, path)
        back = read_features(path)
        assert np.array_equal(back.frames, seq.frames) and np.array_equal(back.labels, seq.labels)
        assert features_to_bytes(back) == path.read_bytes()
    detail("20 labelled feature files round-trip byte for byte")


@pytest.mark.criterion(9)
def test_corruption_gives_typed_errors(corpus, tmp_path, detail):
    rng = np.random.default_rng(9)
    feature_raw = features_to_bytes(corpus[0])
    ckpt_raw = checkpoint_bytes(pretrain(TrainConfig(total_steps=3, warmup_steps=1), corpus[:8]).state)
    typed = {"features": 0, "checkpoint": 0}
    trials = 0
    for kind, raw in (("features", feature_raw), ("checkpoint", ckpt_raw)):
        for _ in range(150):
            data = bytearray(raw)
            mode = rng.integers(3)
            if mode == 0:
                data = data[: int(rng.integers(0, len(data)))]
            elif mode == 1:
                for pos in rng.integers(0, len(data), size=int(rng.integers(1, 4))):
                    data[pos] ^= int(rng.integers(1, 256))
            else:
                pos = int(rng.integers(0, 64))
                data[pos:pos + 4] = rng.bytes(4)
            trials += 1
            try:
                if kind == "features":
                    features_from_bytes(bytes(data))
                else:
                    path = tmp_path / "c.ckpt"
                    path.write_bytes(bytes(data))
                    load_checkpoint(path)
            except Decoar2Error:
                typed[kind] += 1
    detail(f"{trials} corrupted files: typed errors {typed}, no other exception escaped")
    # every checkpoint mutation changes checksummed bytes, so each one must be detected
    assert typed["checkpoint"] == 150
