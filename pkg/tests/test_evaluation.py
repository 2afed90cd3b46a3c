from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from planeqc.errors import DegenerateError, DomainError
from planeqc.evaluation import (
    SWEEP_HEADER,
    evaluate,
    paired_ttest,
    plcc,
    severity_sweep,
    srcc,
    write_sweep,
)
from planeqc.imaging import CorpusSpec, gen_synthetic_corpus
from planeqc.model import ModelConfig, QCModel
from planeqc.scoring import calibrate, quality_score

from oracles import naive_pearson, naive_spearman


def test_srcc_examples():
    assert srcc([1, 2, 3, 4], [2, 5, 9, 11]) == pytest.approx(1.0)
    assert srcc([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert srcc([1, 2, 3, 4], [10, 30, 20, 40]) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(DomainError):
        srcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(DomainError):
        srcc([1, 2], [1, 2])
    with pytest.raises(DomainError):
        srcc([1, 2, 3], [1, 2])
    with pytest.raises(DomainError):
        plcc([1, 2, float("nan")], [1, 2, 3])


def test_plcc_examples():
    x = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    assert plcc(x, 2 * x + 1) == pytest.approx(1.0)
    assert plcc(x, -x) == pytest.approx(-1.0)
    assert plcc(x, x ** 2) == pytest.approx(0.0, abs=1e-15)


def test_paired_ttest_examples():
    d = np.array([1.0, -1.0, 2.0, -2.0, 3.0])
    t, p = paired_ttest(d, np.zeros(5))
    assert t == pytest.approx(0.6 * math.sqrt(5) / math.sqrt(4.3), rel=1e-12)
    assert p == pytest.approx(2 * sps.t.sf(abs(t), 4), rel=1e-10)
    with pytest.raises(DegenerateError):
        paired_ttest([1, 2, 3], [1, 2, 3])
    with pytest.raises(DegenerateError):
        paired_ttest([3, 4, 5], [1, 2, 3])
    with pytest.raises(DomainError):
        paired_ttest([1], [2])


def test_evaluate_bundle():
    target = np.array([0.1, 0.4, 0.35, 0.8, 0.9])
    pred = target + np.array([0.01, -0.02, 0.03, 0.0, -0.01])
    base = target + np.array([0.2, -0.1, 0.3, -0.25, 0.15])
    m = evaluate(pred, target, base)
    assert m.n == 5 and m.t < 0 and 0 < m.p < 1
    doc = json.loads(m.to_json())
    assert set(doc) == {"srcc", "plcc", "t", "p", "n"}
    assert evaluate(pred, target).t is None


vectors = st.integers(3, 50).flatmap(
    lambda n: st.tuples(st.lists(st.integers(-5, 5), min_size=n, max_size=n),
                        st.lists(st.floats(-100, 100, allow_nan=False), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(vectors)
def test_correlations_match_direct_formulas(xy):
    x, y = [float(v) for v in xy[0]], xy[1]
    if len(set(x)) < 2 or len(set(y)) < 2 or np.std(y) < 1e-6:
        return
    assert srcc(x, y) == pytest.approx(naive_spearman(x, y), abs=1e-10)
    assert plcc(x, y) == pytest.approx(naive_pearson(x, y), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_transform_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    assert srcc(np.exp(x), y ** 3) == pytest.approx(srcc(x, y), abs=1e-12)
    assert plcc(scale * x + shift, y) == pytest.approx(plcc(x, y), abs=1e-10)


@pytest.fixture(scope="module")
def sweep_setup():
    spec = CorpusSpec(n_planes=2, size=32, n_pool=4, k1=2, k2=10, n_query_pristine=2, n_query_degraded=0)
    split = gen_synthetic_corpus(spec, 1)
    model = QCModel(ModelConfig(channels=(4, 4, 6), rank=2, lra_hidden=3))
    anchors = {p.name: {im.name: im.pixels for im in split.pool[p.id][:2]} for p in split.planes}
    stats = calibrate(model, {p.name: [im.pixels for im in split.train[p.id]] for p in split.planes}, anchors)
    images = [split.query[p.id][0] for p in split.planes]
    return model, stats, anchors, images


def test_sweep_level_zero_reproduces_plain_scores(sweep_setup):
    model, stats, anchors, images = sweep_setup
    points, _ = severity_sweep(model, stats, images, anchors, levels=(0.0,))
    plain = [quality_score(model, im.pixels, im.plane.name, anchors[im.plane.name], stats).Q for im in images]
    assert [p.Q for p in points] == plain * 2


def test_sweep_is_deterministic(tmp_path, sweep_setup):
    model, stats, anchors, images = sweep_setup
    a, ma = severity_sweep(model, stats, images, anchors, levels=(0.0, 0.5, 1.0), seed=3)
    b, mb = severity_sweep(model, stats, images, anchors, levels=(0.0, 0.5, 1.0), seed=3)
    assert a == b and set(ma) == {"rigid", "nonrigid"}
    write_sweep(tmp_path / "s.csv", a)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER) and len(lines) == 1 + 2 * 2 * 3
