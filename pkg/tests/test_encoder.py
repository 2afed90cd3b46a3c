from __future__ import annotations

import numpy as np
import pytest

from planeqc import numerics as nx
from planeqc.encoder import EncoderConfig, build_encoder, extract
from planeqc.errors import ConfigError, DimensionError
from planeqc.numerics import Tensor
from planeqc.oks import SynergyExpert, assemble_synergy


@pytest.fixture(scope="module")
def enc():
    return build_encoder(EncoderConfig())


@pytest.fixture(scope="module")
def pixels():
    return np.random.default_rng(0).uniform(0, 1, (64, 64))


def test_same_seed_same_weights():
    a, b = build_encoder(EncoderConfig(seed=4)), build_encoder(EncoderConfig(seed=4))
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())
    c = build_encoder(EncoderConfig(seed=5))
    assert not np.array_equal(a.state_dict()["enc.l1.conv.w"], c.state_dict()["enc.l1.conv.w"])


def test_weight_names():
    names = set(build_encoder(EncoderConfig(channels=(4, 4, 4))).state_dict())
    expected = {f"enc.l{i}.{p}.{t}" for i in (1, 2, 3) for p in ("conv", "res1", "res2") for t in "wb"}
    expected |= {f"proj.l{i}.w0" for i in (1, 2, 3)}
    assert names == expected


def test_feature_shapes(enc):
    feats = extract(enc, np.zeros((128, 128)))
    assert [m.shape for m in feats.maps] == [(16, 64, 64), (32, 32, 32), (64, 16, 16)]


def test_config_requires_three_levels():
    with pytest.raises(ConfigError):
        EncoderConfig(channels=(8, 16))


def test_frozen_weights_get_no_grad(enc, pixels):
    ad = SynergyExpert(np.random.default_rng(1).normal(size=(2, 16)), np.random.default_rng(2).normal(size=(16, 2)), 1.0)
    feats = extract(enc, pixels, [ad, None, None])
    x = Tensor(np.ones(feats[0].shape, dtype=np.float32), requires_grad=True)
    nx.backward(nx.reduce_sum(feats[0] * x))
    assert all(w.grad is None for w in enc.weights.values())


def test_zero_expert_is_base_projection(enc, pixels):
    bb = enc.backbone(pixels)
    base = extract(enc, bb)
    empty = assemble_synergy([(np.zeros((0, 16)), np.zeros((16, 0)))], alpha=4.0, r=4, dim=16)
    adapted = extract(enc, bb, [empty, None, None])
    assert np.array_equal(adapted[0].data, base[0].data)
    rng = np.random.default_rng(3)
    zero_alpha = SynergyExpert(rng.normal(size=(3, 16)), rng.normal(size=(16, 3)), 0.0)
    assert np.array_equal(extract(enc, bb, [zero_alpha, None, None])[0].data, base[0].data)


def test_adaptation_is_additive_and_linear_in_alpha(enc, pixels):
    bb = enc.backbone(pixels)
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 32)), rng.normal(0, 0.1, size=(32, 4))
    base = extract(enc, bb)[1].data.astype(np.float64)
    d1 = extract(enc, bb, [None, SynergyExpert(a, b, 0.5), None])[1].data - base
    d2 = extract(enc, bb, [None, SynergyExpert(a, b, 1.0), None])[1].data - base
    x = bb[1].data.reshape(32, -1).astype(np.float64)
    oracle = (0.5 * b @ (a @ x)).reshape(base.shape)
    assert np.allclose(d1, oracle, atol=1e-4 * np.abs(oracle).max())
    assert np.allclose(d2, 2 * d1, atol=1e-4 * np.abs(d1).max())


def test_adapter_dim_mismatch(enc, pixels):
    ad = SynergyExpert(np.ones((1, 8)), np.ones((8, 1)), 1.0)
    with pytest.raises(ConfigError):
        extract(enc, pixels, [ad, None, None])
    with pytest.raises(DimensionError):
        enc.backbone(np.zeros((60, 64)))


def test_siamese_determinism(enc, pixels):
    a, b = extract(enc, pixels), extract(enc, pixels)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.maps, b.maps))
    assert enc.embed(pixels).shape == (64,)
