from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from planeqc import numerics as nx
from planeqc.errors import ConfigError, ContractError
from planeqc.losses import loss_ncc, loss_sim, loss_smooth
from planeqc.lra import (
    IDENTITY_PARAMS,
    MODES,
    LocalisationNet,
    affine_grid,
    build_affine,
    cascade_align,
    compose,
    identity_transform,
    sample_bilinear,
)
from planeqc.numerics import Tensor
from planeqc.numerics.gradcheck import max_relative_error
from planeqc.training import Adam


def _levels(rng, chans=(3, 4, 5), side=16):
    return [Tensor(rng.normal(size=(c, side >> i, side >> i))) for i, c in enumerate(chans)]


def _nets(chans=(3, 4, 5), mode="affine"):
    src = (chans[0],) + tuple(chans[:-1])
    return [LocalisationNet(2 * c, 4, mode, [0, i]) for i, c in enumerate(src)]


def test_mode_table():
    assert MODES == {"affine": 6, "translation": 2, "rotation": 1, "scale": 2, "shear": 2,
                     "rotation_scale": 3, "translation_scale": 4, "rotation_translation": 3}
    for mode in MODES:
        assert np.array_equal(identity_transform(mode).matrix(), [[1, 0, 0], [0, 1, 0]])
        assert len(IDENTITY_PARAMS[mode]) == MODES[mode]


def test_build_affine_examples():
    assert np.array_equal(build_affine("translation", [0, 0]).matrix(), [[1, 0, 0], [0, 1, 0]])
    with nx.precision("f64"):
        rot = build_affine("rotation", [np.pi / 2]).matrix()
    assert np.allclose(rot, [[0, -1, 0], [1, 0, 0]], atol=1e-15)
    assert np.array_equal(build_affine("rotation_scale", [0, 2, 3]).matrix(), [[2, 0, 0], [0, 3, 0]])
    assert np.array_equal(build_affine("shear", [0.5, 0.25]).matrix(), [[1, 0.5, 0], [0.25, 1, 0]])
    assert np.array_equal(build_affine("translation_scale", [1, 2, 3, 4]).matrix(), [[3, 0, 1], [0, 4, 2]])
    with pytest.raises(ContractError):
        build_affine("affine", [1, 0, 0])
    with pytest.raises(ConfigError):
        build_affine("projective", [1])


def test_affine_grid_examples():
    g = affine_grid(identity_transform(), 3, 4).data
    assert np.allclose(g[0, 0], [-1, -1]) and np.allclose(g[-1, -1], [1, 1])
    shifted = affine_grid(build_affine("translation", [0.5, 0.0]), 3, 4).data
    assert np.allclose(shifted[..., 0], g[..., 0] + 0.5) and np.allclose(shifted[..., 1], g[..., 1])
    corners = affine_grid(build_affine("scale", [2, 2]), 2, 2).data
    assert np.array_equal(corners.reshape(4, 2), [[-2, -2], [2, -2], [-2, 2], [2, 2]])


def test_sample_bilinear_examples():
    feat = Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
    assert sample_bilinear(feat, Tensor(np.zeros((1, 1, 2)))).data.item() == 1.5
    assert sample_bilinear(feat, Tensor(np.full((1, 1, 2), 5.0))).data.item() == 0.0
    big = Tensor(np.random.default_rng(0).normal(size=(4, 9, 11)))
    assert np.array_equal(sample_bilinear(big, affine_grid(identity_transform(), 9, 11)).data, big.data)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.4, 0.4), min_size=6, max_size=6), st.lists(st.floats(-0.4, 0.4), min_size=6, max_size=6))
def test_composition_matches_sequential_warp(p1, p2):
    eye = np.array([1, 0, 0, 0, 1, 0], dtype=np.float64)
    t1, t2 = (eye + np.array(p1) * 0.5).reshape(2, 3), (eye + np.array(p2) * 0.5).reshape(2, 3)
    with nx.precision("f64"):
        grid1 = affine_grid(Tensor(t1), 5, 6).data
        # resample grid1 through t2 as if it were a 2-channel map
        h2 = np.vstack([t1, [0, 0, 1]])
        pts = affine_grid(Tensor(t2), 5, 6).data
        via = np.einsum("ij,hwj->hwi", h2[:2], np.concatenate([pts, np.ones((5, 6, 1))], axis=2))
        direct = affine_grid(Tensor(compose(t2, t1)), 5, 6).data
    assert np.max(np.abs(via - direct)) <= 1e-5
    assert grid1.shape == (5, 6, 2)


def test_fresh_net_predicts_identity():
    rng = np.random.default_rng(1)
    for mode in ("affine", "rotation", "translation_scale"):
        net = LocalisationNet(6, 4, mode, 0)
        t = net(Tensor(rng.normal(size=(3, 8, 8))), Tensor(rng.normal(size=(3, 8, 8))))
        assert np.array_equal(t.matrix(), [[1, 0, 0], [0, 1, 0]])
        assert t.params.shape == (MODES[mode],)
    with pytest.raises(ConfigError):
        LocalisationNet(6, 4, "affine", 0)(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((2, 8, 8))))


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    with nx.precision("f64"):
        net = LocalisationNet(4, 3, "rotation_scale", 5)
        a, b = Tensor(rng.normal(size=(2, 8, 8))), Tensor(rng.normal(size=(2, 8, 8)))
        w = Tensor(rng.normal(size=(2, 3)))
        head = [net.params["head.w"], net.params["head.b"]]
        for p in head:
            p.data[...] = rng.normal(0, 0.1, size=p.shape)
        err = max_relative_error(lambda *_: nx.reduce_sum(net(a, b).theta * w), head)
    assert err <= 1e-4


def test_identity_cascade_passes_features_through():
    rng = np.random.default_rng(3)
    fa, fb = _levels(rng), _levels(rng)
    aa, ab, thetas = cascade_align(fa, fb, _nets())
    for x, y in zip(aa + ab, fa + fb):
        assert np.array_equal(x.data, y.data)
    assert loss_smooth(thetas).item() == 0.0
    _, ab_self, _ = cascade_align(fa, fa, _nets())
    assert loss_sim(fa, ab_self).item() == pytest.approx(-3.0, abs=1e-5)
    assert loss_ncc(fa, ab_self).item() == pytest.approx(-3.0, abs=1e-5)
    with pytest.raises(ContractError):
        cascade_align(fa[:2], fb[:2], _nets())


def test_cascade_seeds_next_level_with_pooled_aligned_map():
    rng = np.random.default_rng(4)
    fa, fb = _levels(rng), _levels(rng)
    nets = _nets()
    seen = []

    class Spy:
        def __init__(self, net):
            self.net = net

        def __call__(self, a, b):
            seen.append((a.data.copy(), b.data.copy()))
            return self.net(a, b)

    _, ab, _ = cascade_align(fa, fb, [nets[0], Spy(nets[1]), nets[2]])
    pooled = ab[0].data.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))
    assert np.allclose(seen[0][1], pooled)
    assert np.array_equal(seen[0][0], fa[0].data.reshape(3, 8, 2, 8, 2).mean(axis=(2, 4)))


def _smooth_map(rng, c=2, side=16):
    return ndimage.gaussian_filter(rng.normal(size=(c, side, side)), sigma=(0, 2.0, 2.0)) * 5.0


def _fit_translation(fixed: Tensor, moving: Tensor, seed: int, steps: int = 150) -> np.ndarray:
    net = LocalisationNet(2 * fixed.shape[0], 4, "translation", seed)
    opt = Adam(net.parameters(), lr=0.01)
    for _ in range(steps):
        t = net(fixed, moving)
        warped = sample_bilinear(moving, affine_grid(t, *moving.shape[1:]))
        loss = loss_sim([fixed], [warped]) + loss_ncc([fixed], [warped])
        nx.backward(loss)
        opt.step()
        for p in net.parameters():
            p.zero_grad()
    with nx.no_grad():
        return net(fixed, moving).matrix()


def test_swapped_pair_thetas_compose_to_identity():
    rng = np.random.default_rng(5)
    base = Tensor(_smooth_map(rng))
    shift = build_affine("translation", [0.15, -0.1])
    moved = sample_bilinear(base, affine_grid(shift, 16, 16))
    t_ab = _fit_translation(base, moved, seed=7)
    t_ba = _fit_translation(moved, base, seed=7)
    both = compose(t_ab, t_ba)
    assert np.linalg.norm(np.vstack([both, [0, 0, 1]]) - np.eye(3)) <= 0.1
    # and each recovers the planted shift direction
    assert t_ab[0, 2] < 0 < t_ba[0, 2]
