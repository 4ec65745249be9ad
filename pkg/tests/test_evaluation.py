import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpfedemb.data import generate_synthetic_identities
from dpfedemb.evaluation import (EmbeddingSet, UnresolvableFARError, allowed_false_accepts, minibatch_scores,
                                 pairwise_scores, recall_at_far, recall_at_far_minibatch, recall_from_scores,
                                 roc_from_scores, roc_points, subsample_by_label, summary, write_roc_csv,
                                 write_summary_json)
from dpfedemb.params import RngStream


def brute_force_recall(es, far, metric="cosine"):
    """Scan every observed score as a candidate threshold (accept score >= t)."""
    e = es.embeddings
    if metric == "cosine":
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
    pos, neg = [], []
    n = len(es)
    for i in range(n):
        for j in range(i + 1, n):
            (pos if es.labels[i] == es.labels[j] else neg).append(float(e[i] @ e[j]))
    pos, neg = np.array(pos), np.array(neg)
    best = 0.0
    for t in np.unique(np.concatenate([pos, neg])):
        if np.count_nonzero(neg >= t) / neg.size <= far:
            best = max(best, np.count_nonzero(pos >= t) / pos.size)
    return best


def random_set(seed, n=None):
    gen = np.random.default_rng(seed)
    n = n or int(gen.integers(20, 201))
    labels = gen.integers(0, max(2, n // int(gen.integers(2, 6))), n)
    centers = gen.standard_normal((labels.max() + 1, 4))
    emb = centers[labels] * gen.uniform(0.2, 2.0) + gen.standard_normal((n, 4))
    if seed % 5 == 0:
        emb = np.round(emb, 1)  # force ties
    return EmbeddingSet(emb, labels)


def test_pairwise_examples():
    p, n = pairwise_scores(EmbeddingSet(np.ones((2, 3)), [1, 1]))
    assert (p.size, n.size) == (1, 0)
    p, n = pairwise_scores(EmbeddingSet(np.eye(4), [0, 1, 2, 3]))
    np.testing.assert_array_equal(n, 0.0)
    p, n = pairwise_scores(EmbeddingSet(np.random.default_rng(0).standard_normal((4, 2)), [0, 0, 1, 2]))
    assert p.size + n.size == 6
    with pytest.raises(ValueError):
        EmbeddingSet(np.ones((1, 2)), [0])


def test_pairwise_tiling_is_exact(monkeypatch):
    import dpfedemb.evaluation as ev
    es = random_set(1, n=150)
    full = pairwise_scores(es)
    monkeypatch.setattr(ev, "_TILE", 16)
    tiled = pairwise_scores(es)
    np.testing.assert_array_equal(np.sort(full[0]), np.sort(tiled[0]))
    np.testing.assert_array_equal(np.sort(full[1]), np.sort(tiled[1]))


@pytest.mark.parametrize("seed", range(50))
def test_recall_matches_brute_force(seed):
    es = random_set(seed)
    far = [1e-2, 0.05, 0.1, 0.3][seed % 4]
    pos, neg = pairwise_scores(es)
    if 1 / neg.size > far:
        pytest.skip("too few negatives")
    assert recall_at_far(es, far) == brute_force_recall(es, far)


@pytest.mark.parametrize("seed", range(10))
def test_recall_matches_brute_force_inner_product(seed):
    es = random_set(100 + seed)
    assert recall_at_far(es, 0.1, "inner") == brute_force_recall(es, 0.1, "inner")


def test_threshold_is_feasible_and_tight():
    gen = np.random.default_rng(0)
    pos, neg = gen.normal(1, 1, 500), gen.normal(0, 1, 1000)
    r, t = recall_from_scores(pos, neg, 0.05)
    assert np.count_nonzero(neg >= t) <= 50
    assert r == np.count_nonzero(pos >= t) / 500
    below = np.max(np.concatenate([pos, neg])[np.concatenate([pos, neg]) < t])
    assert np.count_nonzero(neg >= below) > 50


def test_ties_at_the_cut_are_rejected():
    # 10 negatives, FAR 0.1 allows one false accept; the top two negatives tie
    neg = np.array([0.9, 0.9] + [0.0] * 8)
    pos = np.array([0.95, 0.9, 0.5])
    r, t = recall_from_scores(pos, neg, 0.1)
    assert t == 0.95 and r == pytest.approx(1 / 3)


def test_recall_examples():
    assert recall_from_scores(np.ones(10), np.zeros(2000), 1e-3)[0] == 1.0
    gen = np.random.default_rng(1)
    r = recall_from_scores(gen.standard_normal(10_000), gen.standard_normal(10_000), 0.1)[0]
    assert r == pytest.approx(0.1, abs=0.01)
    with pytest.raises(UnresolvableFARError):
        recall_from_scores(np.ones(3), np.zeros(50), 1e-2)
    with pytest.raises(UnresolvableFARError):
        recall_from_scores(np.ones(3), np.zeros(0), 0.5)
    with pytest.raises(ValueError):
        recall_from_scores(np.ones(3), np.zeros(10), 1.5)


def test_allowed_false_accepts_float_edges():
    assert allowed_false_accepts(0.1, 10) == 1
    assert allowed_false_accepts(0.3, 10) == 3  # 0.3*10 rounds below 3 in floating point
    assert allowed_false_accepts(1e-3, 999) == 0
    assert allowed_false_accepts(1.0, 7) == 7


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_recall_monotone_in_far(seed):
    es = random_set(seed, n=120)
    pos, neg = pairwise_scores(es)
    fars = np.geomspace(1 / neg.size, 1, 25)
    rec = [recall_from_scores(pos, neg, f)[0] for f in fars]
    assert all(a <= b for a, b in zip(rec, rec[1:]))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_label_permutation_and_scale_invariance(seed, scale):
    es = random_set(seed, n=80)
    remap = np.random.default_rng(seed).permutation(es.labels.max() + 1) + 1000
    base = recall_at_far(es, 0.1)
    assert recall_at_far(EmbeddingSet(es.embeddings, remap[es.labels]), 0.1) == base
    assert recall_at_far(EmbeddingSet(es.embeddings * scale, es.labels), 0.1) == base


def test_minibatch_variants():
    es = random_set(3, n=100)
    assert recall_at_far_minibatch(es, 0.1, 100, RngStream(0)) == recall_at_far(es, 0.1)
    assert recall_at_far_minibatch(es, 0.1, 500, RngStream(0)) == recall_at_far(es, 0.1)
    perfect = EmbeddingSet(np.repeat(np.eye(10), 8, axis=0), np.repeat(np.arange(10), 8))
    for b in (2, 7, 16, 33):
        assert recall_at_far_minibatch(perfect, 0.05, b, RngStream(b)) == 1.0
    with pytest.raises(ValueError):
        minibatch_scores(es, 1, RngStream(0))


def _projected_identities(n_ids=200, per_id=10):
    users = generate_synthetic_identities(n_ids, 1, per_id, 32, 0.6, RngStream(0), signal_dim=16,
                                          nuisance_std=1.5)
    x = np.concatenate([u.inputs for u in users])
    return EmbeddingSet(x, np.concatenate([u.labels for u in users]))


def test_minibatch_approximation_is_consistent():
    es = _projected_identities()
    assert len(es) == 2000
    full = recall_at_far(es, 1e-2)
    approx = recall_at_far_minibatch(es, 1e-2, 256, RngStream(0))
    assert abs(full - approx) < 0.05


def test_roc_examples():
    perfect = EmbeddingSet(np.repeat(np.eye(5), 4, axis=0), np.repeat(np.arange(5), 4))
    curve = roc_points(perfect, num_points=10)
    np.testing.assert_array_equal(curve.recall, 1.0)
    gen = np.random.default_rng(0)
    rnd = EmbeddingSet(gen.standard_normal((2000, 16)), gen.integers(0, 200, 2000))
    curve = roc_points(rnd, num_points=40)
    assert np.all(np.diff(curve.recall) >= 0) and np.all(np.diff(curve.far) > 0)
    assert curve.far[0] == pytest.approx(1 / pairwise_scores(rnd)[1].size) and curve.far[-1] == 1.0
    sel = curve.far >= 0.05
    np.testing.assert_allclose(curve.recall[sel], curve.far[sel], atol=0.05)
    assert all(0 <= f <= 1 and 0 <= r <= 1 for f, r in curve.points)
    with pytest.raises(ValueError):
        roc_points(rnd, num_points=1)


def test_subsample_by_label():
    es = random_set(4, n=150)
    sub = subsample_by_label(es, 5, RngStream(0))
    assert len(np.unique(sub.labels)) == 5
    for lab in np.unique(sub.labels):
        assert np.count_nonzero(sub.labels == lab) == np.count_nonzero(es.labels == lab)
    assert subsample_by_label(es, 10_000, RngStream(0)) is es


def test_outputs():
    gen = np.random.default_rng(0)
    pos, neg = gen.normal(1, 1, 100), gen.normal(0, 1, 500)
    buf = io.StringIO()
    write_roc_csv(roc_from_scores(pos, neg, 5), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "far,recall,threshold" and len(lines) == 6
    s = summary(pos, neg)
    assert s["recall@0.001"] is None and s["recall@0.01"] is not None
    buf = io.StringIO()
    write_summary_json(s, buf)
    assert json.loads(buf.getvalue())["num_negative_pairs"] == 500
