import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from epsseg.errors import ConfigError
from epsseg.head import (
    GmmPrior,
    SegmentationHead,
    TemperatureSchedule,
    anneal_temperature,
    build_prior,
    gumbel_softmax_sample,
    infer_assignment,
    select_component,
)


@pytest.fixture
def head():
    torch.manual_seed(0)
    return SegmentationHead(feature_dim=8, num_classes=3)


# ---------------------------------------------------------------- classify_logits


def test_logits_length(head):
    assert head.classify_logits(torch.randn(5, 8)).shape == (5, 3)


def test_logits_deterministic(head):
    h = torch.randn(1, 8).repeat(2, 1)
    f = head.classify_logits(h)
    assert torch.equal(f[0], f[1])


def test_zeroed_classifier_outputs_bias(head):
    with torch.no_grad():
        for layer in head.classifier:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.zero_()
    f = head.classify_logits(torch.randn(4, 8))
    assert torch.equal(f, head.classifier[-1].bias.expand(4, 3))


# ---------------------------------------------------------------- FiLM


def test_film_identity_reproduces_unconditioned(head):
    h = torch.randn(6, 8)
    logits = head.classify_logits(h)
    forced = head.film_modulate(h, logits, gamma=torch.ones_like(h), beta=torch.zeros_like(h))
    plain = head.chunk(h)
    assert torch.equal(forced.mean, plain.mean) and torch.equal(forced.std, plain.std)


def test_film_identity_via_generator_weights(head):
    with torch.no_grad():
        head.g_gamma[-1].weight.zero_()
        head.g_gamma[-1].bias.fill_(1.0)
        head.g_beta[-1].weight.zero_()
        head.g_beta[-1].bias.zero_()
    h = torch.randn(6, 8)
    out = head.film_modulate(h, head.classify_logits(h))
    assert torch.equal(out.mean, head.chunk(h).mean)
    assert torch.equal(out.std, head.chunk(h).std)


def test_film_zero_gamma_ignores_h(head):
    beta = torch.randn(1, 8).repeat(2, 1)
    h = torch.randn(2, 8)
    out = head.film_modulate(h, head.classify_logits(h), gamma=torch.zeros_like(h), beta=beta)
    assert torch.equal(out.mean[0], out.mean[1]) and torch.equal(out.std[0], out.std[1])


def test_film_chunk_sizes(head):
    out = head.film_modulate(torch.randn(3, 8), torch.randn(3, 3))
    assert out.mean.shape == out.std.shape == (3, 4)
    assert (out.std > 0).all()


# ---------------------------------------------------------------- Gumbel-Softmax


def test_gumbel_sample_on_simplex():
    logits = torch.randn(1000, 5, dtype=torch.float64) * 3
    for tau in (0.5, 1.0, 2.0):
        y = gumbel_softmax_sample(logits, tau, noise_seed=1)
        assert (y >= 0).all()
        assert torch.allclose(y.sum(-1), torch.ones(1000, dtype=torch.float64), atol=1e-6)


def test_gumbel_zero_noise_equal_logits_uniform():
    y = gumbel_softmax_sample(torch.full((4,), 0.7), 0.5, noise=torch.zeros(4))
    assert torch.allclose(y, torch.full((4,), 0.25))


def test_gumbel_seeded():
    logits = torch.randn(3, 4)
    assert torch.equal(gumbel_softmax_sample(logits, 0.7, 5), gumbel_softmax_sample(logits, 0.7, 5))


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_gumbel_rejects_nonpositive_tau(tau):
    with pytest.raises(ValueError):
        gumbel_softmax_sample(torch.zeros(3), tau)


def test_gumbel_argmax_frequencies_match_softmax():
    # Gumbel-max: argmax(f + g) ~ Categorical(softmax(f)) for any tau
    n = 100_000
    logits = torch.tensor([1.0, -0.5, 0.3, 2.0], dtype=torch.float64)
    expected = torch.softmax(logits, 0).numpy()
    for tau in (0.5, 3.0):
        y = gumbel_softmax_sample(logits.expand(n, 4), tau, noise_seed=7)
        freq = np.bincount(y.argmax(-1).numpy(), minlength=4) / n
        assert np.all(np.abs(freq - expected) < 0.01)


# ---------------------------------------------------------------- temperature


def test_tau_starts_at_one():
    assert anneal_temperature(TemperatureSchedule(), 0, 1000) == 1.0


def test_tau_floor():
    assert anneal_temperature(TemperatureSchedule(time_scale=1.0), 10**6) == 0.5


def test_tau_literal_schedule_one_step():
    # exp(-0.999) = 0.368... < 0.5
    assert anneal_temperature(TemperatureSchedule(rate=0.999, time_scale=1.0), 1) == 0.5


def test_tau_scaled_schedule_value():
    assert anneal_temperature(TemperatureSchedule(time_scale=1000.0), 250) == pytest.approx(math.exp(-0.999 * 0.25))


@settings(max_examples=50, deadline=None)
@given(t=st.integers(0, 10**5), dt=st.integers(0, 10**4), scale=st.sampled_from([1.0, 100.0, 5000.0]))
def test_tau_monotone_and_bounded(t, dt, scale):
    s = TemperatureSchedule(time_scale=scale)
    a, b = anneal_temperature(s, t), anneal_temperature(s, t + dt)
    assert 0.5 <= b <= a <= 1.0


# ---------------------------------------------------------------- inference / selection


def test_infer_uniform():
    y, _ = infer_assignment(torch.ones(5))
    assert torch.allclose(y, torch.full((5,), 0.2))


def test_infer_unique_max():
    _, comp = infer_assignment(torch.tensor([0.1, 0.0, 3.0, -1.0]))
    assert comp.item() == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-100, 100))
def test_infer_shift_invariant(values, shift):
    logits = torch.tensor(values, dtype=torch.float64)
    a, _ = infer_assignment(logits)
    b, _ = infer_assignment(logits + shift)
    assert torch.allclose(a, b, atol=1e-9, rtol=0)


def test_select_label_overrides():
    for y in (torch.tensor([[0.9, 0.05, 0.05]]), torch.tensor([[0.0, 0.0, 1.0]])):
        assert select_component(y, torch.tensor([2])).item() == 2


def test_select_argmax_when_unlabeled():
    assert select_component(torch.tensor([[0.1, 0.7, 0.2]]), torch.tensor([-1])).item() == 1


def test_select_tie_breaks_low():
    assert select_component(torch.tensor([[0.5, 0.5]]), torch.tensor([-1])).item() == 0


def test_select_mixed_batch():
    y = torch.tensor([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]])
    assert select_component(y, torch.tensor([0, -1, 1])).tolist() == [0, 0, 1]


# ---------------------------------------------------------------- prior


def test_build_prior_means():
    p = build_prior(3, 4)
    np.testing.assert_array_equal(p.means, [[3, 0, 0, 0], [0, 3, 0, 0], [0, 0, 3, 0]])
    np.testing.assert_array_equal(p.stds, np.ones((3, 4)))
    assert abs(p.weights.sum() - 1) < 1e-9


@pytest.mark.parametrize("scale", [1.0, 3.0, 7.5])
def test_prior_pairwise_distance(scale):
    p = build_prior(5, 8, scale)
    for i, j in itertools.combinations(range(5), 2):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(p.means[i], p.means[j])))
        assert d == pytest.approx(scale * math.sqrt(2), rel=1e-12)


def test_prior_rejects_small_latent():
    with pytest.raises(ConfigError):
        build_prior(4, 3)


def test_prior_json_round_trip():
    p = build_prior(3, 5)
    q = GmmPrior.from_json(p.to_json())
    np.testing.assert_array_equal(p.means, q.means)
    np.testing.assert_array_equal(p.weights, q.weights)


def test_prior_rejects_bad_weights():
    with pytest.raises(ConfigError):
        GmmPrior(np.zeros((2, 2)), np.ones((2, 2)), np.array([0.6, 0.6]))
