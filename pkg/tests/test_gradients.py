import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_example, random_model
from oracles import fd_grad, rel_err
from tracinwe.gradients import (
    ExampleGradientRecord,
    GradientStore,
    LayerSelector,
    SparseWordGrad,
    StoreError,
    compute_records,
    dense_embedding_grad,
    param_grads,
    per_example_param_grads,
    precompute_store,
    topk_positions,
    topk_word_grads,
    word_embedding_grads,
    word_grads_from_positions,
)
from tracinwe.textmodel import example_grads


@given(st.integers(0, 2**16))
def test_sparse_word_grads_equal_dense_embedding_grad(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed)
    ex = random_example(rng)
    sparse = word_embedding_grads(model, ex).densify(model.config.vocab_size, model.config.embed_dim)
    np.testing.assert_allclose(sparse, dense_embedding_grad(model, ex), rtol=0, atol=1e-14)
    np.testing.assert_allclose(sparse, example_grads(model, ex)["embedding.weight"], rtol=0, atol=1e-14)


def test_word_grads_against_finite_differences():
    rng = np.random.default_rng(5)
    model = random_model(5)
    ex = random_example(rng)
    words = sorted(set(ex.words()))
    g = word_embedding_grads(model, ex)
    num = fd_grad(model, ex, "embedding.weight", rows=words)
    assert rel_err(np.array([g.entries[w] for w in words]), num[words]) < 1e-6
    assert set(g.entries) == set(words)


def test_repeated_words_sum_their_positions():
    ids = np.array([1, 7, 7, 2])
    g = np.arange(8.0).reshape(4, 2)
    wg = word_grads_from_positions(ids, g)
    np.testing.assert_array_equal(wg.entries[7], g[1] + g[2])


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=20), st.integers(1, 25))
def test_topk_positions_properties(norms, k):
    norms = np.array(norms)
    valid = np.ones(len(norms), dtype=bool)
    pos = topk_positions(norms, valid, k)
    assert len(pos) == min(k, len(norms))
    assert list(pos) == sorted(pos)
    rest = np.setdiff1d(np.arange(len(norms)), pos)
    if len(rest) and len(pos):
        assert norms[pos].min() >= norms[rest].max()


def test_topk_ties_go_to_earlier_positions():
    assert list(topk_positions(np.ones(5), np.ones(5, dtype=bool), 2)) == [0, 1]


def test_topk_skips_pads():
    norms = np.array([1.0, 9.0, 2.0, 3.0])
    assert list(topk_positions(norms, np.array([True, False, True, True]), 2)) == [2, 3]


def test_topk_with_long_k_is_exact():
    rng = np.random.default_rng(1)
    model = random_model(1)
    ex = random_example(rng)
    a, b = word_embedding_grads(model, ex), topk_word_grads(model, ex, k=ex.length)
    assert a.entries.keys() == b.entries.keys()
    for w in a.entries:
        assert np.array_equal(a.entries[w], b.entries[w])


def test_sparse_dot_restricted_to_words():
    a = SparseWordGrad({1: np.array([1.0, 2.0]), 5: np.array([3.0, 0.0])})
    b = SparseWordGrad({5: np.array([2.0, 1.0]), 9: np.array([1.0, 1.0])})
    assert a.dot(b) == 6.0
    assert a.dot(b, words=[1]) == 0.0


def test_param_grads_layer_order_and_size():
    model = random_model(3)
    ex = random_example(np.random.default_rng(3))
    sel = LayerSelector.of("conv1", "fc", include_bias=True)
    names = sel.param_names(model.config)
    assert names == ["conv1.weight", "conv1.bias", "fc.weight", "fc.bias"]
    g = param_grads(model, ex, sel)
    full = example_grads(model, ex)
    np.testing.assert_allclose(g, np.concatenate([full[n].ravel() for n in names]), atol=1e-14)
    assert g.size == sel.size(model.config)


def test_selector_rejects_unknown_layer():
    with pytest.raises(ValueError):
        LayerSelector.of("conv9").check(random_model(0).config)


def test_per_example_matrix_matches_single_grads():
    model = random_model(4)
    rng = np.random.default_rng(4)
    exs = [random_example(rng, ex_id=i) for i in range(5)]
    sel = LayerSelector.of("conv2", "fc")
    m = per_example_param_grads(model, exs, sel)
    for row, ex in zip(m, exs):
        np.testing.assert_allclose(row, param_grads(model, ex, sel), atol=1e-14)
    with pytest.raises(ValueError):
        per_example_param_grads(model, exs, LayerSelector.of("embedding"))


def test_record_fc_grad_is_outer_product():
    model = random_model(6)
    ex = random_example(np.random.default_rng(6))
    (rec,) = compute_records(model, 0, [ex], include_bias=True)
    full = example_grads(model, ex)
    np.testing.assert_allclose(rec.fc_grad, np.concatenate([full["fc.weight"].ravel(), full["fc.bias"]]), atol=1e-14)


@given(st.integers(0, 1000))
def test_record_binary_roundtrip(seed):
    model = random_model(seed % 7)
    ex = random_example(np.random.default_rng(seed), ex_id=seed)
    (rec,) = compute_records(model, 3, [ex])
    back = ExampleGradientRecord.decode(rec.encode("<f8"), model.config.embed_dim, "<f8")
    assert (back.example_id, back.checkpoint_step) == (rec.example_id, rec.checkpoint_step)
    assert back.word_grads.entries.keys() == rec.word_grads.entries.keys()
    for w in rec.word_grads.entries:
        assert np.array_equal(back.word_grads.entries[w], rec.word_grads.entries[w])
    for f in ("saliency", "fc_grad", "activation"):
        assert np.array_equal(getattr(back, f), getattr(rec, f))


def test_store_roundtrip_f64_exact_and_f32_close(tiny, tmp_path):
    exs = list(tiny.train)[:20]
    store = precompute_store(tiny.ckpts, exs, k=None, path=tmp_path / "s64", dtype="f64")
    back = GradientStore.load(tmp_path / "s64")
    assert back.steps == store.steps and back.etas == store.etas and back.example_ids() == store.example_ids()
    for s in store.steps:
        for e in exs:
            a, b = store.get(e.id, s), back.get(e.id, s)
            assert a.word_grads.dot(a.word_grads) == b.word_grads.dot(b.word_grads)
    store.save(tmp_path / "s32", "f32")
    b32 = GradientStore.load(tmp_path / "s32")
    s, e = store.steps[-1], exs[0]
    a, b = store.get(e.id, s).word_grads, b32.get(e.id, s).word_grads
    assert abs(a.dot(a) - b.dot(b)) <= 1e-5 * a.dot(a)


def test_store_detects_corruption(tiny, tmp_path):
    precompute_store(tiny.ckpts, list(tiny.train)[:5], path=tmp_path)
    f = next(tmp_path.glob("step_*/records.bin"))
    raw = bytearray(f.read_bytes())
    raw[-1] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(StoreError):
        GradientStore.load(tmp_path)
    (tmp_path / "manifest.json").unlink()
    with pytest.raises(StoreError):
        GradientStore.load(tmp_path)


def test_store_missing_record_is_an_error(tiny):
    store = precompute_store(tiny.ckpts, list(tiny.train)[:3])
    with pytest.raises(KeyError):
        store.get(10**6, store.steps[0])
