import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import average_linkage_clusters
from tracinwe.clustering import (
    ClusterReport,
    agglomerative,
    cluster_hard_examples,
    cluster_rates,
    common_words,
    hard_ids,
    misclassification_rates,
)
from tracinwe.influence import DistanceMatrix, InfluenceContext


def _random_dist(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    return np.linalg.norm(pts[:, None] - pts[None], axis=-1)


@given(st.integers(1, 25), st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_average_linkage_matches_scipy(n, seed, t):
    d = _random_dist(n, seed)
    mine = agglomerative(DistanceMatrix(list(range(n)), d), t)
    assert mine == average_linkage_clusters(d, t)


def test_clusters_cover_ids_once():
    d = _random_dist(12, 1)
    ids = [10 * i + 3 for i in range(12)]
    out = agglomerative(DistanceMatrix(ids, d), 1.0)
    assert sorted(i for c in out for i in c) == ids


def test_ties_merge_smallest_ids_first():
    d = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float)
    # with threshold exactly 1 all three merge; below it none do
    assert agglomerative(DistanceMatrix([5, 2, 9], d), 1.0) == [[2, 5, 9]]
    assert agglomerative(DistanceMatrix([5, 2, 9], d), 0.99) == [[2], [5], [9]]
    # single and complete linkage differ from average on a chain
    chain = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
    assert agglomerative(DistanceMatrix([0, 1, 2], chain), 1.2, "single") == [[0, 1, 2]]
    assert agglomerative(DistanceMatrix([0, 1, 2], chain), 1.2, "complete") == [[0, 1], [2]]


def test_asymmetric_matrix_rejected():
    with pytest.raises(ValueError):
        agglomerative(DistanceMatrix([0, 1], np.array([[0.0, 1.0], [0.5, 0.0]])))
    with pytest.raises(ValueError):
        agglomerative(DistanceMatrix([0, 1], np.zeros((2, 2))), linkage="ward")


def test_hard_ids_threshold():
    assert hard_ids({1: 0.5, 2: 0.4, 3: 0.39, 4: 0.0}, 0.4) == [1, 2]
    assert hard_ids({1: 0.0}, 0.0) == []


def test_common_words_counts_pairs():
    contribs = {(1, 2): {7: 3.0, 8: -1.0}, (1, 3): {7: -2.0, 9: 0.1}, (2, 3): {9: 5.0, 7: 0.01}}
    out = common_words([3, 1, 2], lambda a, b: contribs[(a, b)], top=1)
    assert out == [7, 9]


def test_cluster_rates():
    rep = ClusterReport([[1, 2, 3]], [[]], [{"given": {}, "predicted": {}}])
    f, c = cluster_rates(rep, {1, 4}, [1, 2, 3, 4, 5, 6])
    assert f == 0.5 and c == 0.5  # flagged {1,4}: 1 inside; clean {2,3,5,6}: 2,3 inside


def test_pipeline_on_tiny_data(tiny):
    from dataclasses import replace

    rates, pred = misclassification_rates(tiny.train, tiny.config, replace(tiny.hyper, patience=2), tiny.val, runs=2)
    assert set(rates) == set(tiny.train.ids)
    assert np.allclose(pred.sum(axis=1), 1.0)
    assert all(r in (0.0, 0.5, 1.0) for r in rates.values())
    ctx = InfluenceContext(tiny.ckpts, tiny.train, tiny.vocab)
    hard = tiny.train.ids[:12]
    rep, dist = cluster_hard_examples(ctx, hard, threshold=0.9, min_size=2)
    assert dist.ids == sorted(hard)
    assert all(len(c) >= 2 for c in rep.clusters)
    md = rep.to_markdown(tiny.train, tiny.vocab)
    assert md.startswith("| cluster |") and md.count("\n") == 2 + len(rep.clusters)
