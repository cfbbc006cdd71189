import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from decoar2 import core
from decoar2.errors import ConfigError
from decoar2.quantizer import (
    CodebookConfig,
    GumbelQuantizer,
    codebook_perplexity,
    gumbel_noise,
    gumbel_softmax_probs,
    quantize_inference,
    sample_gumbel,
)

D = torch.float64


def test_gumbel_noise_closed_forms():
    assert gumbel_noise(math.exp(-1)) == pytest.approx(0.0, abs=1e-15)
    assert gumbel_noise(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-15)
    t = gumbel_noise(torch.tensor([math.exp(-1)], dtype=D))
    assert abs(t.item()) < 1e-15


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_gumbel_noise_rejects_endpoints(bad):
    with pytest.raises(ValueError):
        gumbel_noise(bad)


def test_gumbel_noise_mean_is_euler_gamma():
    draws = sample_gumbel(10**6, np.random.default_rng(0))
    assert np.isfinite(draws).all()
    assert abs(draws.mean() - 0.5772156649) < 0.01


def test_probs_two_way_closed_form():
    p = gumbel_softmax_probs(torch.tensor([math.log(2), 0.0], dtype=D), torch.zeros(2, dtype=D), 1.0)
    assert torch.allclose(p, torch.tensor([2 / 3, 1 / 3], dtype=D), atol=1e-15)
    # halving the temperature squares the odds
    p = gumbel_softmax_probs(torch.tensor([math.log(2), 0.0], dtype=D), torch.zeros(2, dtype=D), 0.5)
    assert torch.allclose(p, torch.tensor([4 / 5, 1 / 5], dtype=D), atol=1e-15)


def test_probs_noise_enters_like_a_logit():
    logits = torch.tensor([0.3, -1.0, 2.0], dtype=D)
    noise = torch.tensor([0.5, 0.1, -0.4], dtype=D)
    assert torch.allclose(
        gumbel_softmax_probs(logits, noise, 0.7), gumbel_softmax_probs(logits + noise, torch.zeros(3, dtype=D), 0.7)
    )


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 64), st.floats(0.05, 5.0), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_probs_normalized_and_shift_invariant(V, tau, shift, seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.standard_normal((3, V)) * 4)
    noise = torch.from_numpy(sample_gumbel((3, V), rng))
    p = gumbel_softmax_probs(logits, noise, tau)
    assert torch.all(p >= 0)
    assert (p.sum(-1) - 1).abs().max() <= 1e-6
    q = gumbel_softmax_probs(logits + shift, noise, tau)
    assert (p - q).abs().max() <= 1e-6


def test_probs_low_temperature_concentrates_on_argmax():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = torch.from_numpy(rng.standard_normal(320))
        noise = torch.from_numpy(sample_gumbel(320, rng))
        p = gumbel_softmax_probs(logits, noise, 1e-3)
        assert p[int(torch.argmax(logits + noise))] >= 1 - 1e-3


def test_probs_reject_nonpositive_temperature():
    with pytest.raises(ValueError):
        gumbel_softmax_probs(torch.zeros(3), torch.zeros(3), 0.0)


def _quantizer(d=8, G=2, V=4, seed=0):
    torch.manual_seed(seed)
    return GumbelQuantizer(d, CodebookConfig(G, V)).double()


def test_hard_forward_selects_argmax_entries():
    q = _quantizer()
    z = torch.randn(5, 8, dtype=D)
    noise = torch.from_numpy(sample_gumbel((5, 2, 4), np.random.default_rng(0)))
    out = q(z, 0.8, noise)
    expected_idx = (q.compute_logits(z) + noise).argmax(-1)
    assert torch.equal(out.indices, expected_idx)
    picked = torch.stack([q.entries[g, out.indices[:, g]] for g in range(2)], dim=1).flatten(1)
    assert torch.allclose(out.quantized, q.output(picked), atol=1e-12)


def test_soft_and_hard_share_probabilities_and_indices():
    q = _quantizer()
    z = torch.randn(6, 8, dtype=D)
    noise = torch.from_numpy(sample_gumbel((6, 2, 4), np.random.default_rng(2)))
    hard, soft = q(z, 1.3, noise), q(z, 1.3, noise, soft=True)
    assert torch.equal(hard.indices, soft.indices)
    assert torch.equal(hard.probs, soft.probs)


def test_zero_noise_picks_logit_argmax():
    q = _quantizer()
    z = torch.randn(7, 8, dtype=D)
    out = q(z, 1.0, torch.zeros(7, 2, 4, dtype=D))
    assert torch.equal(out.indices, q.compute_logits(z).argmax(-1))


def test_straight_through_gradient_equals_soft_gradient_for_linear_readout():
    # with a readout linear in the selection, d/d(selection) is the same at the hard and the
    # soft point, so everything upstream of the probabilities gets identical gradients
    q = _quantizer()
    z = torch.randn(4, 8, dtype=D, requires_grad=True)
    noise = torch.from_numpy(sample_gumbel((4, 2, 4), np.random.default_rng(3)))
    w = torch.randn(4, 8, dtype=D)
    upstream = {"z": z, "logits.weight": q.logits.weight, "logits.bias": q.logits.bias}
    hard = {k: v.clone() for k, v in core.backward((q(z, 0.9, noise).quantized * w).sum(), upstream).items()}
    soft = core.backward((q(z, 0.9, noise, soft=True).quantized * w).sum(), upstream)
    for k in upstream:
        assert torch.allclose(hard[k], soft[k], atol=1e-12), k


def test_soft_path_matches_finite_differences():
    q = _quantizer(seed=4)
    z = torch.randn(5, 8, dtype=D, requires_grad=True)
    noise = torch.from_numpy(sample_gumbel((5, 2, 4), np.random.default_rng(4)))
    w = torch.randn(5, 8, dtype=D)
    params = {"z": z, **dict(q.named_parameters())}
    errs = core.gradient_error(lambda: (q(z, 0.7, noise, soft=True).quantized * w).sum(), params)
    assert max(errs.values()) < 1e-5, errs


def test_straight_through_forward_is_exactly_hard():
    q = _quantizer(seed=5)
    z = torch.randn(5, 8, dtype=D)
    noise = torch.from_numpy(sample_gumbel((5, 2, 4), np.random.default_rng(5)))
    out = q(z, 0.6, noise)
    onehot = torch.nn.functional.one_hot(out.indices, 4).to(D)
    assert torch.equal(out.quantized, q._project(onehot))


def test_inference_ties_resolve_to_lowest_index():
    q = _quantizer()
    with torch.no_grad():
        q.logits.weight.zero_()
        q.logits.bias.zero_()
    out = quantize_inference(torch.randn(3, 8, dtype=D), q)
    assert torch.equal(out.indices, torch.zeros(3, 2, dtype=torch.long))


def test_inference_matches_training_path_at_zero_noise():
    q = _quantizer(seed=6)
    z = torch.randn(6, 8, dtype=D)
    a = q.inference(z)
    b = q(z, 1.0, torch.zeros(6, 2, 4, dtype=D))
    assert torch.equal(a.indices, b.indices)
    assert torch.allclose(a.quantized, b.quantized, atol=1e-12)
    assert torch.allclose(a.probs, b.probs, atol=1e-12)


def test_perplexity_closed_forms():
    assert codebook_perplexity(np.full((1, 320), 1 / 320))[0] == pytest.approx(320)
    onehot = np.zeros((1, 320))
    onehot[0, 7] = 1
    assert codebook_perplexity(onehot)[0] == pytest.approx(1.0)
    assert codebook_perplexity(np.array([[0.5, 0.5, 0, 0]]))[0] == pytest.approx(2.0)


@settings(max_examples=40)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_perplexity_bounds(V, seed):
    p = np.random.default_rng(seed).dirichlet(np.full(V, 0.3), size=2)
    ppl = codebook_perplexity(p)
    assert np.all(ppl >= 1 - 1e-9) and np.all(ppl <= V + 1e-9)


def test_perplexity_rejects_unnormalized():
    with pytest.raises(ValueError):
        codebook_perplexity(np.array([[0.5, 0.4]]))


def test_codebook_config_validation():
    with pytest.raises(ConfigError):
        CodebookConfig(0, 320)
    q = GumbelQuantizer(64, CodebookConfig())
    assert q.entries.shape == (2, 320, 32)
