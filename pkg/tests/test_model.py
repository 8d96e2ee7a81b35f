import math

import numpy as np
import pytest
import torch

from ntmplan.model import (
    CheckpointError,
    CoordinateEmbedder,
    NtmConfig,
    build_model,
    load_params,
    params_hash,
    read_header,
    save_params,
    sinusoid_frequencies,
)
from ntmplan.trajectory import propose_lines

TINY = dict(width=16, layers=2, heads=2, ff_width=32, horizon=6, n_agents=3)


def proposals(n=3, horizon=6, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (batch or 1, n, 6)
    sg = rng.uniform(-0.9, 0.9, shape)
    out = np.stack([propose_lines(x, horizon) for x in sg])
    return torch.from_numpy(out if batch else out[0]).float()


def randomize_head(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.head.weight.copy_(torch.randn(model.head.weight.shape, generator=g) * 0.1)
        model.head.bias.copy_(torch.randn(model.head.bias.shape, generator=g) * 0.1)
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        NtmConfig(width=10)
    with pytest.raises(ValueError):
        NtmConfig(width=12, heads=5)
    with pytest.raises(ValueError):
        NtmConfig(attention="sparse")
    with pytest.raises(ValueError):
        NtmConfig(layers=0)
    cfg = NtmConfig(**TINY, loss_weights=(1, 2, 3, 4))
    assert NtmConfig.from_dict(cfg.to_dict()) == cfg


def test_frequencies_are_geometric():
    f = sinusoid_frequencies(8, 16.0)
    assert len(f) == 4
    assert f[0].item() == pytest.approx(math.pi)
    assert f[-1].item() == pytest.approx(16 * math.pi)
    ratios = (f[1:] / f[:-1]).numpy()
    np.testing.assert_allclose(ratios, ratios[0])


def test_embedding_features_layout():
    emb = CoordinateEmbedder(16, 16.0)
    coords = torch.tensor([[0.3, -0.5, 0.25, 0.9]], dtype=torch.float64)
    feats = emb.features(coords)
    assert feats.shape == (1, 16)
    # channel t occupies the first width/4 slots: sin, cos at the base frequency, then the next frequency
    f = sinusoid_frequencies(4, 16.0)
    expect = [math.sin(f[0] * 0.3), math.cos(f[0] * 0.3), math.sin(f[1] * 0.3), math.cos(f[1] * 0.3)]
    np.testing.assert_allclose(feats[0, :4].numpy(), expect, atol=1e-12)
    y = -0.5
    np.testing.assert_allclose(feats[0, 4].item(), math.sin(f[0] * y), atol=1e-12)


def test_embedding_rejects_unnormalized_input():
    emb = CoordinateEmbedder(16)
    with pytest.raises(ValueError):
        emb(torch.tensor([[0.5, 1.5, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        emb(torch.tensor([[1.2, 0.0, 0.0, 0.0]]))


def test_identity_at_initialization():
    model = build_model(NtmConfig(**TINY))
    x = proposals()
    with torch.no_grad():
        assert torch.equal(model(x), x)


@pytest.mark.parametrize("attention", ["full", "factored"])
def test_endpoints_pinned_and_shapes(attention):
    model = randomize_head(build_model(NtmConfig(**TINY, attention=attention)))
    x = proposals(batch=2)
    with torch.no_grad():
        y = model(x)
    assert y.shape == x.shape
    assert torch.equal(y[:, :, 0], x[:, :, 0])
    assert torch.equal(y[:, :, -1], x[:, :, -1])
    assert not torch.equal(y, x)
    with torch.no_grad():
        single = model(x[1])
    torch.testing.assert_close(single, y[1], rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("attention", ["full", "factored"])
def test_agent_permutation_equivariance(attention):
    model = randomize_head(build_model(NtmConfig(**TINY, attention=attention)), seed=1)
    model.eval()
    x = proposals(n=3, seed=4)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        torch.testing.assert_close(model(x[perm]), model(x)[perm], rtol=1e-5, atol=1e-6)


def test_agent_count_is_free():
    model = randomize_head(build_model(NtmConfig(**TINY)))
    with torch.no_grad():
        assert model(proposals(n=7)).shape == (7, 7, 4)


def test_horizon_mismatch_rejected():
    model = build_model(NtmConfig(**TINY))
    with pytest.raises(ValueError, match="waypoints"):
        model(proposals(horizon=8))
    with pytest.raises(ValueError):
        model(torch.zeros(2, 3))


def test_build_is_seeded():
    a = build_model(NtmConfig(**TINY, seed=5))
    b = build_model(NtmConfig(**TINY, seed=5))
    c = build_model(NtmConfig(**TINY, seed=6))
    assert params_hash(a) == params_hash(b) != params_hash(c)


def test_checkpoint_round_trip(tmp_path):
    model = randomize_head(build_model(NtmConfig(**TINY)))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(model, p1, env_hash="abc", normalization={"center": [0, 0, 0], "scale": 1.0})
    loaded, cfg, header = load_params(p1, expected_env_hash="abc")
    assert cfg == model.config
    assert header["env_hash"] == "abc"
    assert params_hash(loaded) == params_hash(model)
    save_params(loaded, p2, env_hash="abc", normalization={"center": [0, 0, 0], "scale": 1.0})
    assert p1.read_bytes() == p2.read_bytes()
    # atomic writes leave no temporary files behind
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt", "b.ckpt"]
    x = proposals()
    with torch.no_grad():
        assert torch.equal(loaded(x), model.eval()(x))


def test_checkpoint_errors(tmp_path):
    model = build_model(NtmConfig(**TINY))
    path = tmp_path / "m.ckpt"
    save_params(model, path, env_hash="abc")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_params(path, expected_env_hash="xyz")
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        read_header(tmp_path / "junk.ckpt")
