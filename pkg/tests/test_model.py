import numpy as np
import pytest
import torch

from epsseg.data import MaskSpec, PatchBatch
from epsseg.errors import ConfigError
from epsseg.head import LevelDistribution
from epsseg.losses import LossWeights
from epsseg.model import HVAE, EpsSegModel, LatentState, ModelConfig, count_parameters, reparameterize
from epsseg.train import compute_losses

SMALL = ModelConfig(num_levels=3, channels=(8, 8, 8), top_latent_dim=6, num_classes=3, patch_side=15, latent_channels=2)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return HVAE(SMALL).eval()


def test_zero_input_gives_finite_h(net):
    h = net.encode_bottom_up(torch.zeros(2, 15, 15)).h
    assert h.shape == (2, 2 * SMALL.top_latent_dim)
    assert torch.isfinite(h).all()


def test_encoder_deterministic(net):
    x = torch.rand(1, 15, 15).repeat(2, 1, 1)
    h = net.encode_bottom_up(x).h
    assert torch.equal(h[0], h[1])
    assert torch.equal(h, net.encode_bottom_up(x).h)


def test_wrong_patch_side_rejected(net):
    with pytest.raises(ValueError):
        net.encode_bottom_up(torch.zeros(1, 17, 17))


def _conv_out(n, k=3, s=2, p=1):
    return (n + 2 * p - k) // s + 1


def test_level_sides_default_architecture():
    cfg = ModelConfig(num_levels=3, patch_side=31)
    expected, n = [], 31
    for _ in range(3):
        n = _conv_out(n)
        expected.append(n)
    assert cfg.level_sides() == expected == [16, 8, 4]
    feats = HVAE(cfg).encode_bottom_up(torch.zeros(1, 31, 31))
    assert [f.shape[-1] for f in feats.levels] == [16, 8]
    assert feats.h.dim() == 2  # top level is a flat vector (spatial extent 1)


def test_even_patch_side_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(patch_side=32)


def test_default_size_well_under_reference_budget():
    # spec-table widths; the reference ceiling is 3,800,869 trainable parameters
    big = ModelConfig(channels=(32, 64, 128), blocks_per_level=2)
    assert count_parameters(EpsSegModel(big)) < 3_800_869
    assert count_parameters(EpsSegModel(ModelConfig())) < count_parameters(EpsSegModel(big))


def _latents(net, seed=0):
    x = torch.rand(3, 15, 15, generator=torch.Generator().manual_seed(seed))
    feats = net.encode_bottom_up(x)
    top = LevelDistribution(*torch.chunk(feats.h, 2, dim=-1))
    top = LevelDistribution(top.mean, torch.nn.functional.softplus(top.std) + 1e-3)
    return net.infer_latents(feats, top, noise_seed=seed)


def test_decode_replays_sampling_path(net):
    latents, pred = _latents(net)
    with torch.no_grad():
        replay = net.decode_top_down(latents)
    assert replay.shape == (3, 15, 15)
    assert torch.equal(replay, pred)
    assert torch.equal(replay, net.decode_top_down(latents))


def test_shapes_agree_per_level(net):
    latents, _ = _latents(net)
    assert len(latents) == SMALL.num_levels
    for lv in latents.levels[:-1]:
        assert lv.posterior.mean.shape == lv.prior.mean.shape == lv.z.shape
        assert lv.posterior.std.shape == lv.prior.std.shape
    assert latents.top.z.shape == (3, SMALL.top_latent_dim)


def test_decode_sensitive_to_top_latent(net):
    latents, _ = _latents(net)
    direction = torch.randn(latents.top.z.shape, generator=torch.Generator().manual_seed(1))
    base = net.decode_top_down(latents)
    for eps in (1e-2, 1e-1):
        latents.levels[-1].z = latents.levels[-1].z + eps * direction
        moved = net.decode_top_down(latents)
        assert (moved - base).abs().max() > 0


def test_decode_rejects_missing_level(net):
    latents, _ = _latents(net)
    with pytest.raises(ValueError):
        net.decode_top_down(LatentState(latents.levels[1:]))


def test_level_prior_floor_and_finiteness(net):
    z_top = torch.zeros(2, SMALL.top_latent_dim)
    d = net.level_prior(2, z_top)
    assert torch.isfinite(d.mean).all() and torch.isfinite(d.std).all()
    big = net.level_prior(2, -1e4 * torch.ones(2, SMALL.top_latent_dim))
    assert (big.std >= 1e-3).all()
    lower = net.level_prior(1, torch.randn(2, 8, 4, 4) * 50)
    assert (lower.std >= 1e-3).all()


def test_level_prior_zeroed_layer_gives_bias():
    torch.manual_seed(0)
    net = HVAE(SMALL)
    conv = net.prior_net[0]
    with torch.no_grad():
        conv.weight.zero_()
    d = net.level_prior(1, torch.randn(2, 8, 4, 4))
    k = SMALL.latent_channels
    expected = conv.bias[:k].view(1, k, 1, 1).expand_as(d.mean)
    assert torch.equal(d.mean, expected)


def test_level_prior_top_is_contract_violation(net):
    with pytest.raises(ValueError):
        net.level_prior(SMALL.num_levels, torch.zeros(1, SMALL.top_latent_dim))


def test_reparameterize_zero_std_limit():
    mean = torch.randn(5)
    z = reparameterize(LevelDistribution(mean, torch.full((5,), 1e-30)), 3)
    assert torch.allclose(z, mean, atol=1e-25, rtol=0)


def test_reparameterize_seeded():
    d = LevelDistribution(torch.zeros(4), torch.ones(4))
    assert torch.equal(reparameterize(d, 9), reparameterize(d, 9))
    assert not torch.equal(reparameterize(d, 9), reparameterize(d, 10))


def test_reparameterize_sample_mean_clt():
    n = 100_000
    mean, std = torch.tensor([0.3, -2.0], dtype=torch.float64), torch.tensor([1.5, 0.2], dtype=torch.float64)
    d = LevelDistribution(mean.expand(n, 2), std.expand(n, 2))
    z = reparameterize(d, 0)
    bound = 4 * std / np.sqrt(n)
    assert torch.all((z.mean(0) - mean).abs() < bound)


def test_every_parameter_gets_gradient():
    torch.manual_seed(0)
    model = EpsSegModel(SMALL)
    rng = np.random.default_rng(0)
    P = SMALL.patch_side
    patches = rng.random((8, P, P)).astype(np.float32)
    mask = MaskSpec(3)
    lo, hi = mask.bounds(P)
    masked = patches.copy()
    masked[:, lo:hi, lo:hi] = 0
    labels = np.array([0, 1, 2, -1, 0, 1, -1, 2])
    batch = PatchBatch(patches, masked, patches[:, lo:hi, lo:hi].copy(), labels, np.zeros((8, 3), np.int64))
    bd = compute_losses(model, batch, LossWeights(entropy_weight=0.1), tau=0.8, noise_seed=1)
    bd.total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or p.grad.abs().max() == 0]
    assert dead == []


def test_round_trip_finite_for_random_inputs():
    torch.manual_seed(1)
    model = EpsSegModel(SMALL).eval()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(4):  # 1000 trials in batches of 250
            x = torch.rand(250, 15, 15, generator=gen)
            out = model(x, tau=0.5, noise_seed=gen)
            assert torch.isfinite(out.prediction).all()
            assert torch.isfinite(out.logits).all()
