import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracinwe.gradients import LayerSelector, precompute_store
from tracinwe.influence import (
    InfluenceContext,
    LastLayerInfluence,
    LastLayerInfluenceConfig,
    distance_matrix,
    final_activations,
    influence_distance,
    influence_last,
    last_layer_influence,
    matched_similarity,
    rank,
    representer,
    tracin,
    tracin_last,
    tracin_tfidf,
    tracin_we,
    tracin_we_syn,
    tracin_we_topk,
    word_filter,
)
from tracinwe.similarity import SynonymTable, tfidf_fit


@pytest.fixture(scope="module")
def setup(tiny):
    exs = list(tiny.train) + list(tiny.test)
    exact = precompute_store(tiny.ckpts, exs, None, LayerSelector.of("embedding", "fc"), dtype="f64")
    ctx = InfluenceContext(tiny.ckpts, tiny.train, tiny.vocab, k=4)
    return tiny, exact, ctx


def _pairs(tiny, n, seed=0):
    rng = np.random.default_rng(seed)
    tr, te = list(tiny.train), list(tiny.test)
    return [(tr[i], te[j]) for i, j in zip(rng.integers(0, len(tr), n), rng.integers(0, len(te), n))]


def test_word_level_tracin_equals_dense_embedding_tracin(setup):
    tiny, store, _ = setup
    sel = LayerSelector.of("embedding")
    for a, b in _pairs(tiny, 15):
        sparse = tracin_we(store, a.id, b.id)
        dense = tracin(tiny.ckpts, a, b, sel).score
        assert sparse.score == pytest.approx(dense, rel=1e-8, abs=1e-15)
        assert math.fsum(sparse.word_contribs.values()) == pytest.approx(sparse.score, rel=1e-8, abs=1e-15)


def test_output_layer_tracin_matches_dense(setup):
    tiny, store, _ = setup
    sel = LayerSelector.of("fc")
    for a, b in _pairs(tiny, 5):
        assert tracin_last(store, a.id, b.id).score == pytest.approx(tracin(tiny.ckpts, a, b, sel).score, rel=1e-10)


def test_only_shared_words_contribute(setup):
    tiny, store, _ = setup
    for a, b in _pairs(tiny, 10):
        shared = set(a.words()) & set(b.words())
        assert set(tracin_we(store, a.id, b.id).word_contribs) == shared


def test_token_filters_partition_the_score(setup):
    tiny, store, ctx = setup
    common = tiny.vocab.common_set
    for a, b in _pairs(tiny, 10):
        full = tracin_we(store, a.id, b.id).score
        noc = tracin_we(store, a.id, b.id, "no_common", common).score
        com = tracin_we(store, a.id, b.id, "common_only", common).score
        assert noc + com == pytest.approx(full, rel=1e-10, abs=1e-15)
    with pytest.raises(ValueError):
        word_filter("bogus")


def test_long_k_topk_is_bitwise_exact(tiny):
    exs = list(tiny.train)[:30] + list(tiny.test)[:5]
    exact = precompute_store(tiny.ckpts, exs, None, dtype="f64")
    topk = precompute_store(tiny.ckpts, exs, tiny.vocab.max_len, dtype="f64")
    for a in exs[:30]:
        for b in exs[30:]:
            assert tracin_we_topk(topk, a.id, b.id).score == tracin_we(exact, a.id, b.id).score
    with pytest.raises(ValueError):
        tracin_we_topk(exact, exs[0].id, exs[1].id)


def test_context_scores_match_pairwise(setup):
    tiny, store, ctx = setup
    x = list(tiny.test)[3]
    trs = list(tiny.train)
    ctx.ensure([x], None)
    ctx.ensure([x], 4)
    checks = {
        "tracin_we": lambda e: tracin_we(ctx.store(None), e.id, x.id).score,
        "tracin_we_topk": lambda e: tracin_we(ctx.store(4), e.id, x.id).score,
        "tracin_we_noc": lambda e: tracin_we(ctx.store(None), e.id, x.id, "no_common", ctx.common).score,
        "tracin_common": lambda e: tracin_we(ctx.store(None), e.id, x.id, "specials_only").score,
        "tracin_last": lambda e: tracin_last(ctx.store(None), e.id, x.id).score,
        "tracin_tfidf": lambda e: tracin_tfidf(ctx.store(None), ctx.tfidf(), e, x).score,
        "influence_last": lambda e: influence_last(ctx.last_layer(), ctx.model(), e, x).score,
        "representer": lambda e: representer(ctx.model(), tiny.train, e, x, ctx.last_cfg).score,
    }
    for method, pair in checks.items():
        vec = ctx.scores(method, x)
        ref = np.array([pair(e) for e in trs])
        np.testing.assert_allclose(vec, ref, rtol=1e-9, atol=1e-14, err_msg=method)


def test_negated_method_swaps_proponents_and_opponents(setup):
    tiny, _, ctx = setup
    x = list(tiny.test)[0]
    r, n = ctx.rank("tracin_we", x), ctx.rank("neg:tracin_we", x)
    np.testing.assert_array_equal(n.scores, -r.scores)
    assert n.proponents[:5] == r.opponents[:5]


def test_random_method_is_seeded(setup):
    tiny, _, ctx = setup
    x = list(tiny.test)[0]
    np.testing.assert_array_equal(ctx.scores("random", x), ctx.scores("random", x))
    assert not np.array_equal(ctx.scores("random", x), ctx.scores("random", list(tiny.test)[1]))


def test_dense_layer_method_matches_tracin(setup):
    tiny, _, ctx = setup
    x = list(tiny.test)[1]
    e = list(tiny.train)[4]
    s = ctx.scores("tracin:conv1,fc", x)[tiny.train.ids.index(e.id)]
    assert s == pytest.approx(tracin(tiny.ckpts, e, x, LayerSelector.of("conv1", "fc")).score, rel=1e-10)


def test_unknown_method_is_rejected(setup):
    tiny, _, ctx = setup
    with pytest.raises(ValueError):
        ctx.scores("nope", list(tiny.test)[0])


def test_identity_synonyms_reduce_to_word_level_tracin(setup):
    tiny, store, _ = setup
    table = SynonymTable(tiny.model.params["embedding.weight"], threshold=1.0)
    for a, b in _pairs(tiny, 8):
        assert tracin_we_syn(store, a.id, b.id, table).score == pytest.approx(tracin_we(store, a.id, b.id).score, rel=1e-12, abs=1e-15)


def test_matched_similarity_maximizes_absolute_total():
    m = np.array([[1.0, -5.0], [2.0, 0.5]])
    assert matched_similarity(m) == -3.0
    assert matched_similarity(np.array([[0.3, 0.2, 0.9]])) == 0.9
    assert matched_similarity(np.zeros((0, 0))) == 0.0


def test_influence_last_solves_the_damped_system(tiny):
    model = tiny.model
    lli = last_layer_influence(model, tiny.train, LastLayerInfluenceConfig(damping=0.01))
    x = list(tiny.test)[0]
    g = lli.grad(final_activations(model, [x])[0], x.label)
    expect = lli.train_grads @ np.linalg.solve(lli.hessian, g)
    np.testing.assert_allclose(lli.scores(g), expect, rtol=1e-8, atol=1e-14)


def test_hessian_matches_finite_differences_of_the_gradient():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
    w, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    # softmax over-parameterization makes the bare Hessian singular, so damp and subtract
    lli = LastLayerInfluence(x, y, w, b, l2=0.0, damping=1.0)

    def total_grad(wflat):
        m = LastLayerInfluence(x, y, wflat.reshape(3, 3), b, damping=1.0)
        return m.train_grads.sum(axis=0)

    h = 1e-6
    num = np.stack([(total_grad(w.ravel() + h * e) - total_grad(w.ravel() - h * e)) / (2 * h) for e in np.eye(9)], axis=1)
    np.testing.assert_allclose(lli.hessian - np.eye(9), num, atol=1e-6)


def test_self_influence_is_positive(setup):
    tiny, store, ctx = setup
    for e in list(tiny.train)[:10]:
        assert tracin_we(store, e.id, e.id).score > 0
        assert tracin_last(store, e.id, e.id).score > 0
        assert representer(ctx.model(), tiny.train, e, e).score > 0


def test_representer_is_proponent_positive_by_construction():
    # sal_j < 0 for the groundtruth class and a.a' > 0 gives a positive score
    from tracinwe.influence import representer_score

    s = representer_score(np.array([0.2, -0.2]), np.array([1.0, 1.0]), np.array([1.0, 0.5]), 1, 1e-3, 10)
    assert s > 0


@given(st.floats(-10, 10), st.floats(0.01, 10), st.floats(0.01, 10))
def test_influence_distance_range(i_ab, i_aa, i_bb):
    d = influence_distance(i_ab, i_aa, i_bb)
    assert d >= 0
    assert influence_distance(math.sqrt(i_aa * i_bb), i_aa, i_bb) == pytest.approx(0.0, abs=1e-12)


def test_influence_distance_rejects_nonpositive_self_influence():
    with pytest.raises(ValueError):
        influence_distance(0.1, 0.0, 1.0)


def test_distance_matrix_symmetric_zero_diagonal():
    g = {i: np.array([math.cos(i), math.sin(i), 1.0]) for i in range(5)}
    dm = distance_matrix(range(5), lambda a, b: float(g[a] @ g[b]))
    np.testing.assert_array_equal(dm.d, dm.d.T)
    assert not dm.d.diagonal().any()


def test_rank_breaks_ties_by_id():
    r = rank([1.0, 2.0, 1.0, 0.0], [7, 3, 5, 9])
    assert r.proponents == [3, 5, 7, 9]
    assert r.opponents == [9, 5, 7, 3]
    assert r.score_of(5) == 1.0
