from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_example, random_model
from oracles import fd_grad, rel_err
from tracinwe.corpus import ConfigError, Example
from tracinwe.textmodel import (
    ModelConfig,
    TrainConfig,
    count_params,
    epoch_batches,
    epoch_order,
    example_grads,
    fit,
    forward,
    load_checkpoints,
    predict_proba,
    save_checkpoints,
)


@settings(max_examples=6)
@given(st.integers(0, 2**16), st.sampled_from([0.0, 0.01]))
def test_gradients_match_finite_differences(seed, l2):
    rng = np.random.default_rng(seed)
    model = random_model(seed, l2=l2)
    ex = random_example(rng)
    g = example_grads(model, ex)
    for name in model.params:
        rows = sorted(set(ex.words())) if name == "embedding.weight" else None
        num = fd_grad(model, ex, name, rows=rows)
        ana = g[name] if rows is None else g[name][rows]
        assert rel_err(ana, num if rows is None else num[rows]) < 1e-4, name


def test_padding_does_not_change_output():
    model = random_model(0)
    a = Example(0, "", 1, (1, 5, 6, 7, 2))
    b = Example(0, "", 1, (1, 5, 6, 7, 2, 0, 0, 0, 0))
    np.testing.assert_array_equal(forward(model, a), forward(model, b))


def test_pad_row_gets_no_gradient():
    model = random_model(1)
    ex = Example(0, "", 0, (1, 5, 2, 0, 0, 0))
    assert not example_grads(model, ex)["embedding.weight"][0].any()


def test_batched_probabilities_match_single_forward():
    model = random_model(2)
    rng = np.random.default_rng(0)
    exs = [random_example(rng, ex_id=i) for i in range(7)]
    p = predict_proba(model, exs)
    for row, ex in zip(p, exs):
        z = forward(model, ex)
        np.testing.assert_allclose(row, np.exp(z - z.max()) / np.exp(z - z.max()).sum(), rtol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(100, 2, conv_specs=((4, 10),))
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_count_params_separates_biases():
    cfg = ModelConfig(50, 3, embed_dim=4, conv_specs=((3, 2),))
    assert count_params(cfg) == {"weights": 3 * 4 * 2 + 2 * 3, "biases": 2 + 3, "total": 35}


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=60, unique=True), st.integers(0, 99), st.integers(1, 5))
def test_epoch_order_is_removal_stable(ids, seed, epoch):
    order = [ids[i] for i in epoch_order(ids, seed, epoch)]
    kept = [i for i in ids if i % 3]
    if kept:
        assert [kept[i] for i in epoch_order(kept, seed, epoch)] == [i for i in order if i % 3]


@given(st.lists(st.integers(0, 500), min_size=2, max_size=80, unique=True), st.integers(1, 9), st.data())
def test_universe_batches_keep_batch_mates(universe, bs, data):
    drop = set(data.draw(st.lists(st.sampled_from(universe), max_size=len(universe) - 1)))
    ids = [u for u in universe if u not in drop]
    full = [[universe[i] for i in b] for b in epoch_batches(universe, 7, 1, bs)]
    sub = [[ids[i] for i in b] for b in epoch_batches(ids, 7, 1, bs, universe)]
    assert len(full) == len(sub)
    assert sub == [[u for u in b if u not in drop] for b in full]


def test_training_is_deterministic_and_learns(tiny):
    again = fit(tiny.config, tiny.train, tiny.hyper)
    for a, b in zip(tiny.ckpts.checkpoints, again.checkpoints):
        for n in a.theta:
            np.testing.assert_array_equal(a.theta[n], b.theta[n])
    acc = np.mean(predict_proba(tiny.model, list(tiny.train)).argmax(1) == tiny.train.labels)
    assert acc > 0.6


def test_checkpoint_layout(tiny):
    c = tiny.ckpts
    assert [k.epoch for k in c.checkpoints] == [0, 1, 2, 3]
    assert [c.checkpoints[i].epoch for i in c.selection] == [1, 2, 3]
    assert all(k.eta == tiny.hyper.lr for k in c.checkpoints)


def test_checkpoint_roundtrip_and_corruption(tiny, tmp_path):
    save_checkpoints(tiny.ckpts, tmp_path)
    back = load_checkpoints(tmp_path)
    assert back.selection == tiny.ckpts.selection and back.config == tiny.config
    for a, b in zip(tiny.ckpts.checkpoints, back.checkpoints):
        assert a.step == b.step
        for n in a.theta:
            np.testing.assert_array_equal(a.theta[n], b.theta[n])
    f = tmp_path / "ckpt_0001.bin"
    raw = bytearray(f.read_bytes())
    raw[10] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoints(tmp_path)


def test_frozen_embeddings_do_not_move(tiny):
    cfg = replace(tiny.config, freeze_embeddings=True)
    ck = fit(cfg, tiny.train, replace(tiny.hyper, epochs=1))
    np.testing.assert_array_equal(ck.checkpoints[0].theta["embedding.weight"], ck.final.theta["embedding.weight"])


def test_early_stopping_marks_best(tiny):
    ck = fit(tiny.config, tiny.train, replace(tiny.hyper, epochs=8, patience=1), tiny.val)
    assert ck.best_index is not None
    assert ck.checkpoints[ck.best_index].epoch <= ck.final.epoch
