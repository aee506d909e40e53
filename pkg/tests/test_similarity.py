import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from oracles import brute_assignment, tfidf_by_hand
from tracinwe.corpus import Dataset, Example
from tracinwe.similarity import SynConfig, SynonymTable, TfIdfModel, solve_assignment, syn, tfidf_cosine, tfidf_fit


def _ds(docs):
    return Dataset([Example(i, "", 0, tuple(d)) for i, d in enumerate(docs)], 2)


DOCS = [(1, 5, 6, 2, 0), (1, 5, 5, 7, 2), (1, 8, 2, 0, 0), (1, 6, 7, 8, 2)]


def test_tfidf_matches_hand_computation():
    m = tfidf_fit(_ds(DOCS))
    stripped = [[t for t in d if t] for d in DOCS]
    for a in DOCS:
        for b in DOCS:
            expect = tfidf_by_hand(stripped, [t for t in a if t], [t for t in b if t])
            assert tfidf_cosine(m, a, b) == pytest.approx(expect, rel=1e-12)


def test_tfidf_matches_sklearn():
    from sklearn.feature_extraction.text import TfidfVectorizer

    texts = [" ".join(f"w{t}" for t in d if t) for d in DOCS]
    vec = TfidfVectorizer(token_pattern=r"\S+", smooth_idf=True, norm="l2")
    x = vec.fit_transform(texts).toarray()
    m = tfidf_fit(_ds(DOCS))
    for i in range(len(DOCS)):
        for j in range(len(DOCS)):
            assert tfidf_cosine(m, DOCS[i], DOCS[j]) == pytest.approx(float(x[i] @ x[j]), abs=1e-12)


def test_unseen_words_get_the_df_zero_idf():
    m = tfidf_fit(_ds(DOCS))
    assert m.default_idf() == pytest.approx(math.log(5) + 1)
    assert tfidf_cosine(m, (99,), (99,)) == pytest.approx(1.0)


@given(st.lists(st.integers(1, 12), min_size=1, max_size=10), st.lists(st.integers(1, 12), min_size=1, max_size=10))
def test_tfidf_cosine_is_symmetric_and_bounded(a, b):
    m = tfidf_fit(_ds(DOCS))
    s = tfidf_cosine(m, a, b)
    assert 0.0 <= s <= 1.0 and s == pytest.approx(tfidf_cosine(m, b, a), abs=1e-15)
    assert tfidf_cosine(m, a, a) == pytest.approx(1.0)


def test_tfidf_json_roundtrip(tmp_path):
    m = tfidf_fit(_ds(DOCS))
    m.save(tmp_path / "t.json")
    assert TfIdfModel.load(tmp_path / "t.json") == m


def test_synonym_predicate():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    t = SynonymTable(emb, 0.7)
    assert t(1, 2) and not t(1, 3) and t(3, 3)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert not t(0, 1)
        assert w and issubclass(w[0].category, RuntimeWarning)
    assert t(0, 0)  # identity wins even for a zero row
    assert syn(emb, 1, 2, 0.999) is False
    with pytest.raises(ValueError):
        SynConfig(threshold=0.0)


def test_synonym_threshold_is_strict():
    emb = np.array([[1.0, 0.0], [0.7, math.sqrt(1 - 0.49)]])
    t = SynonymTable(emb, 0.7)
    c = t.cosine(0, 1)
    assert SynonymTable(emb, c)(0, 1) is False


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_assignment_matches_brute_force(k, seed):
    cost = np.random.default_rng(seed).normal(size=(k, k))
    a = solve_assignment(cost)
    assert sorted(a.mapping) == list(range(k))
    assert a.objective == brute_assignment(cost)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_assignment_matches_scipy(k, seed):
    cost = np.random.default_rng(seed).integers(-20, 20, size=(k, k)).astype(float)
    r, c = linear_sum_assignment(cost)
    assert solve_assignment(cost).objective == cost[r, c].sum()


def test_assignment_input_checks():
    with pytest.raises(ValueError):
        solve_assignment(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        solve_assignment(np.array([[0.0, np.inf], [1.0, 0.0]]))
    assert solve_assignment(np.zeros((0, 0))).objective == 0.0
