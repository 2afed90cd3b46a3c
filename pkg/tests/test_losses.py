from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planeqc import numerics as nx
from planeqc.errors import ConfigError
from planeqc.losses import loss_ncc, loss_orth, loss_sim, loss_smooth, total_loss
from planeqc.lra import build_affine, identity_transform
from planeqc.numerics import Tensor


def _levels(seed, chans=(3, 4, 5), side=8):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(c, side >> i, side >> i)) for i, c in enumerate(chans)]


def _t(arrs):
    return [Tensor(a, dtype=np.float64) for a in arrs]


def test_sim_examples():
    a = _t(_levels(0))
    assert loss_sim(a, a).item() == pytest.approx(-3.0, abs=1e-5)
    assert loss_sim(a, [x * -1.0 for x in a]).item() == pytest.approx(3.0, abs=1e-5)
    e0 = np.zeros((2, 4, 4)); e0[0] = 1.0
    e1 = np.zeros((2, 4, 4)); e1[1] = 1.0
    assert loss_sim(_t([e0] * 3), _t([e1] * 3)).item() == 0.0


def test_ncc_examples():
    a = _levels(1)
    assert loss_ncc(_t(a), _t(a)).item() == pytest.approx(-3.0, abs=1e-5)
    assert loss_ncc(_t(a), _t([2 * x + 5 for x in a])).item() == pytest.approx(-3.0, abs=1e-5)
    assert loss_ncc(_t(a), _t([-x for x in a])).item() == pytest.approx(3.0, abs=1e-5)


@pytest.mark.parametrize("scale", [0.5, 2.0, 10.0])
def test_ncc_affine_intensity_invariance(scale):
    a = _levels(2)
    per_level = [-loss_ncc(_t([x]), _t([scale * x - 1.5])).item() for x in a]
    assert max(abs(v - 1.0) for v in per_level) <= 1e-5


def test_smooth_examples():
    assert loss_smooth([identity_transform()] * 3).item() == 0.0
    shift = build_affine("translation", [3.0, -7.0])
    assert loss_smooth([shift, shift, identity_transform()]).item() == 0.0
    assert loss_smooth([build_affine("scale", [2.0, 2.0])]).item() == 2.0


def test_orth_examples():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4, 10)))
    assert loss_orth([a]).item() == 0.0
    q = np.linalg.qr(rng.normal(size=(32, 32)))[0]
    assert loss_orth([Tensor(q[:2].copy()), Tensor(q[2:4].copy())]).item() == pytest.approx(0.0, abs=1e-6)
    with nx.precision("f64"):
        rows = Tensor(q[:16].copy())
        assert loss_orth([rows, rows]).item() == pytest.approx(16.0, abs=1e-9)
    with pytest.raises(ConfigError):
        loss_orth([a, Tensor(np.ones((3, 10)))])
    with pytest.raises(ConfigError):
        loss_orth([a, a], "l1_ab")
    with pytest.raises(ConfigError):
        loss_orth([a, a], "nuclear")


def test_orth_variant_values_match_direct_formula():
    rng = np.random.default_rng(4)
    mats_a = [rng.normal(size=(2, 6)) for _ in range(3)]
    mats_b = [rng.normal(size=(6, 2)) for _ in range(3)]
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    for variant, norm in (("l1_a", lambda m: np.abs(m).sum()), ("fro_a", np.linalg.norm),
                          ("l1_ab", lambda m: np.abs(m).sum()), ("fro_ab", np.linalg.norm)):
        oracle = 0.0
        for i, j in pairs:
            oracle += norm(mats_a[i] @ mats_a[j].T)
            if variant.endswith("_ab"):
                oracle += norm(mats_b[i].T @ mats_b[j])
        oracle /= len(pairs)
        with nx.precision("f64"):
            got = loss_orth(_t(mats_a), variant, _t(mats_b)).item()
        assert got == pytest.approx(oracle, rel=1e-12)


def test_total_loss_examples():
    b = total_loss(0.0, 0.0, 0.0, 0.0, 0.5)
    assert b.total.item() == 0.0
    b = total_loss(-3.0, -3.0, 0.0, 16.0, 0.5)
    assert b.total.item() == 2.0 and b.reg.item() == -6.0
    b = total_loss(-1.0, 0.5, 0.25, 9.0, 0.0)
    assert b.total.item() == b.reg.item()
    assert set(b.values()) == {"sim", "ncc", "smooth", "orth", "reg", "total"}


seeds = st.integers(0, 10_000)


@settings(max_examples=40, deadline=None)
@given(seeds, seeds)
def test_bounds_and_symmetry(s1, s2):
    a, b = _t(_levels(s1)), _t(_levels(s2))
    sab, sba = loss_sim(a, b).item(), loss_sim(b, a).item()
    nab, nba = loss_ncc(a, b).item(), loss_ncc(b, a).item()
    assert -3 <= sab <= 3 and -3 - 1e-4 <= nab <= 3 + 1e-4
    assert sab == pytest.approx(sba, abs=1e-12) and nab == pytest.approx(nba, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_sim_per_position_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = _levels(seed), _levels(seed + 1)
    scaled = [x * rng.uniform(0.5, 3.0, size=x.shape[1:])[None] for x in b]
    assert loss_sim(_t(a), _t(scaled)).item() == pytest.approx(loss_sim(_t(a), _t(b)).item(), abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_ncc_per_channel_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = _levels(seed), _levels(seed + 1)
    mapped = [x * rng.uniform(0.5, 3.0, size=(x.shape[0], 1, 1)) + rng.normal(size=(x.shape[0], 1, 1)) for x in b]
    assert loss_ncc(_t(a), _t(mapped)).item() == pytest.approx(loss_ncc(_t(a), _t(b)).item(), abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(seeds, st.permutations(range(3)))
def test_orth_nonnegative_and_relabel_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    mats = [rng.normal(size=(2, 8)) for _ in range(3)]
    with nx.precision("f64"):
        base = loss_orth(_t(mats)).item()
        shuffled = loss_orth(_t([mats[i] for i in perm])).item()
    assert base >= 0 and shuffled == pytest.approx(base, rel=1e-12)
    params = rng.normal(size=6)
    assert loss_smooth([build_affine("affine", params)]).item() >= 0
