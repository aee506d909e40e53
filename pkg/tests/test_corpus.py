import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracinwe.corpus import (
    SPECIALS,
    ConfigError,
    Dataset,
    DatasetFormatError,
    Example,
    Vocab,
    build_vocab,
    load_dataset,
    split,
    split_words,
    tokenize,
    write_dataset,
)
from tracinwe.synth import SynthConfig, make_corpus


def test_split_words_lowercases_and_separates_punctuation():
    assert split_words("Hello, World! it's") == ["hello", ",", "world", "!", "it", "'", "s"]


def test_vocab_specials_first_and_frequency_order():
    v = build_vocab(["b a b", "c b a"], common_words=())
    assert v.tokens[:4] == list(SPECIALS)
    assert v.tokens[4:] == ["b", "a", "c"]


def test_vocab_ties_alphabetical_and_max_size():
    v = build_vocab(["z y x"], max_size=6, common_words=())
    assert v.tokens[4:] == ["x", "y"]


def test_tokenize_layout():
    v = build_vocab(["a b"], common_words=())
    v.max_len = 6
    assert tokenize("a zzz b", v) == (1, v.id_of("a"), v.unk_id, v.id_of("b"), 2, 0)


def test_tokenize_truncates_but_keeps_end():
    v = build_vocab(["a"], common_words=())
    v.max_len = 4
    assert tokenize("a a a a a", v) == (1, 4, 4, 2)


def test_common_set_has_start_end_and_stopwords():
    v = build_vocab(["the cat . sat"])
    assert {1, 2, v.id_of("the"), v.id_of(".")} <= v.common_set
    assert v.id_of("cat") not in v.common_set


def test_vocab_json_roundtrip(tmp_path):
    v = build_vocab(["the cat sat"])
    v.save(tmp_path / "v.json")
    w = Vocab.load(tmp_path / "v.json")
    assert w.tokens == v.tokens and w.common_set == v.common_set and w.max_len == v.max_len


def test_bad_vocab_rejected():
    with pytest.raises(ConfigError):
        Vocab(["a", "b", "c", "d"])
    with pytest.raises(ConfigError):
        build_vocab([])


def test_example_length_ignores_trailing_pads():
    ex = Example(0, "", 0, (1, 5, 2, 0, 0))
    assert ex.length == 3 and ex.words() == (1, 5, 2)


@pytest.mark.parametrize("fmt", ["jsonl", "tsv"])
def test_write_load_roundtrip(tmp_path, fmt):
    ds = make_corpus(SynthConfig(n_examples=40, seed=2)).dataset
    p = tmp_path / f"d.{fmt}"
    write_dataset(ds, p, fmt)
    back, lmap = load_dataset(p, fmt)
    assert [(e.id, e.text, e.label) for e in back] == [(e.id, e.text, e.label) for e in ds]


def test_string_labels_numbered_in_sorted_order(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("pos\tgood\nneg\tbad\npos\tfine\n")
    ds, lmap = load_dataset(p)
    assert lmap == {"neg": 0, "pos": 1}
    assert list(ds.labels) == [1, 0, 1]


def test_unknown_label_with_map_is_an_error(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps({"label": "x", "text": "t"}) + "\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p, label_map={"y": 0})


def test_malformed_records(tmp_path):
    p = tmp_path / "d.tsv"
    p.write_text("no tab here\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)
    q = tmp_path / "d.jsonl"
    q.write_text("{not json\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(q)


def test_duplicate_ids_rejected():
    with pytest.raises(DatasetFormatError):
        Dataset([Example(0, "a", 0), Example(0, "b", 0)], 2)


@given(st.integers(0, 10_000))
def test_split_is_a_seeded_partition(seed):
    ds = make_corpus(SynthConfig(n_examples=60, seed=1)).dataset
    parts = split(ds, seed, (0.6, 0.2, 0.2))
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(ds.ids)
    assert [len(p) for p in parts] == [36, 12, 12]
    again = split(ds, seed, (0.6, 0.2, 0.2))
    assert [p.ids for p in parts] == [p.ids for p in again]


def test_split_rejects_bad_fractions():
    ds = make_corpus(SynthConfig(n_examples=20)).dataset
    with pytest.raises(ConfigError):
        split(ds, 0, (0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        split(ds, 0, (1.0, 0.0, 0.0))


def test_without_and_with_replaced():
    ds = Dataset([Example(i, str(i), i % 2) for i in range(5)], 2)
    assert ds.without([1, 3]).ids == [0, 2, 4]
    r = ds.with_replaced([Example(2, "new", 1)])
    assert r.by_id(2).text == "new" and r.ids == ds.ids


def test_synth_flips_are_recorded():
    sc = make_corpus(SynthConfig(n_examples=200, flip_rate=0.05, seed=4))
    assert len(sc.flipped) == 10
    for i in sc.flipped:
        assert sc.dataset.by_id(i).label != sc.true_labels[i]
    assert make_corpus(SynthConfig(n_examples=200, flip_rate=0.05, seed=4)).dataset.examples == sc.dataset.examples
