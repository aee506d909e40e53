"""Influence scores between training and test examples.

Every score is proponent-positive: a training example that pushes the test
example's loss down scores above zero, and self-influence is non-negative for
the gradient-product methods. Checkpoint-summed methods weight each
checkpoint by the learning rate recorded when it was saved.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .corpus import Dataset, Example, Vocab
from .gradients import (
    ExampleGradientRecord,
    GradientStore,
    LayerSelector,
    SparseWordGrad,
    batch_grads,
    compute_records,
    param_grads,
    per_example_param_grads,
)
from .similarity import SynConfig, SynonymTable, TfIdfModel, solve_assignment, tfidf_cosine, tfidf_fit
from .textmodel import CheckpointSet, Model

TOKEN_FILTERS = ("all", "common_only", "no_common", "specials_only")
SPECIAL_TOKEN_IDS = frozenset({1, 2})  # [START], [END]


@dataclass
class InfluenceResult:
    train_id: int
    test_id: int
    score: float
    method: str
    word_contribs: dict[int, float] | None = None
    checkpoints_used: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        out = {"test_id": self.test_id, "train_id": self.train_id, "method": self.method, "score": self.score}
        if self.word_contribs is not None:
            out["word_contribs"] = {str(w): v for w, v in sorted(self.word_contribs.items())}
        return out


@dataclass(frozen=True)
class LastLayerInfluenceConfig:
    damping: float = 1e-3
    lambda_rep: float = 1e-3
    target_class: str = "groundtruth"  # or "predicted"

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.lambda_rep <= 0:
            raise ValueError("lambda_rep must be > 0")
        if self.target_class not in ("groundtruth", "predicted"):
            raise ValueError(f"unknown target_class rule {self.target_class!r}")


# ---------------------------------------------------------------- pairwise TracIn family


def _records(store: GradientStore, train_id: int, test_id: int):
    for step, eta in zip(store.steps, store.etas):
        yield step, eta, store.get(train_id, step), store.get(test_id, step)


def word_filter(token_filter: str, common: Iterable[int] = ()) -> Callable[[int], bool]:
    common = frozenset(common) | SPECIAL_TOKEN_IDS
    if token_filter == "all":
        return lambda w: True
    if token_filter == "common_only":
        return lambda w: w in common
    if token_filter == "no_common":
        return lambda w: w not in common
    if token_filter == "specials_only":
        return lambda w: w in SPECIAL_TOKEN_IDS
    raise ValueError(f"unknown token filter {token_filter!r}; expected one of {TOKEN_FILTERS}")


def tracin_we(
    store: GradientStore,
    train_id: int,
    test_id: int,
    token_filter: str = "all",
    common: Iterable[int] = (),
    method: str = "tracin_we",
) -> InfluenceResult:
    """Word-gradient similarity summed over shared words and checkpoints.

    Uses whatever word gradients the store holds, so a top-k store yields the
    top-k variant.
    """
    keep = word_filter(token_filter, common)
    contribs: dict[int, float] = {}
    for _, eta, a, b in _records(store, train_id, test_id):
        ea, eb = a.word_grads.entries, b.word_grads.entries
        for w in sorted(ea.keys() & eb.keys()):
            if keep(w):
                contribs[w] = contribs.get(w, 0.0) + eta * float(ea[w] @ eb[w])
    score = math.fsum(contribs.values())
    return InfluenceResult(train_id, test_id, score, method, contribs, list(store.steps))


def tracin_we_topk(store: GradientStore, train_id: int, test_id: int, token_filter: str = "all", common: Iterable[int] = ()) -> InfluenceResult:
    if store.k is None:
        raise ValueError("store holds exact word gradients; build it with k set for the top-k variant")
    return tracin_we(store, train_id, test_id, token_filter, common, method="tracin_we_topk")


def wgs_syn_matrix(a: SparseWordGrad, b: SparseWordGrad, table: SynonymTable) -> tuple[list[int], list[int], np.ndarray]:
    """Per-word gradient similarity between every synonym pair; zero elsewhere."""
    wa, wb = sorted(a.entries), sorted(b.entries)
    m = np.zeros((len(wa), len(wb)))
    for i, w in enumerate(wa):
        for j, w2 in enumerate(wb):
            if table(w, w2):
                m[i, j] = float(a.entries[w] @ b.entries[w2])
    return wa, wb, m


def matched_similarity(wgs: np.ndarray) -> float:
    """Sum of WGS over the assignment maximizing total |WGS| (zero-padded to square)."""
    if wgs.size == 0:
        return 0.0
    n = max(wgs.shape)
    padded = np.zeros((n, n))
    padded[: wgs.shape[0], : wgs.shape[1]] = wgs
    asg = solve_assignment(-np.abs(padded))
    return math.fsum(padded[i, j] for i, j in enumerate(asg.mapping))


def tracin_we_syn(store: GradientStore, train_id: int, test_id: int, table: SynonymTable) -> InfluenceResult:
    total = 0.0
    for _, eta, a, b in _records(store, train_id, test_id):
        _, _, wgs = wgs_syn_matrix(a.word_grads, b.word_grads, table)
        total += eta * matched_similarity(wgs)
    return InfluenceResult(train_id, test_id, total, "tracin_we_syn", None, list(store.steps))


def tracin_last(store: GradientStore, train_id: int, test_id: int) -> InfluenceResult:
    """TracIn over the output layer, from stored last-layer gradients."""
    s = math.fsum(eta * float(a.fc_grad @ b.fc_grad) for _, eta, a, b in _records(store, train_id, test_id))
    return InfluenceResult(train_id, test_id, s, "tracin_last", None, list(store.steps))


def tracin_tfidf(store: GradientStore, tfidf: TfIdfModel, x_train: Example, x_test: Example) -> InfluenceResult:
    sim = tfidf_cosine(tfidf, x_train, x_test)
    s = sim * math.fsum(eta * float(a.saliency @ b.saliency) for _, eta, a, b in _records(store, x_train.id, x_test.id))
    return InfluenceResult(x_train.id, x_test.id, s, "tracin_tfidf", None, list(store.steps))


def tracin(
    ckpts: CheckpointSet,
    x_train: Example,
    x_test: Example,
    selector: LayerSelector,
    store: GradientStore | None = None,
) -> InfluenceResult:
    """TracIn over any layer selection, from full gradients at each selected checkpoint.

    When the selector is exactly the output layer and a matching store is
    given, stored gradients are used instead of recomputing.
    """
    selector.check(ckpts.config)
    steps = [c.step for c in ckpts.selected]
    if store is not None and selector.layers == {"fc"} and store.include_bias == selector.include_bias:
        r = tracin_last(store, x_train.id, x_test.id)
        return InfluenceResult(x_train.id, x_test.id, r.score, "tracin", None, steps)
    s = 0.0
    for c in ckpts.selected:
        m = c.model(ckpts.config)
        s += c.eta * float(param_grads(m, x_train, selector) @ param_grads(m, x_test, selector))
    return InfluenceResult(x_train.id, x_test.id, s, "tracin", None, steps)


# ---------------------------------------------------------------- last-layer influence functions


class LastLayerInfluence:
    """Inverse-Hessian influence restricted to a softmax output layer.

    The Hessian is that of the summed training loss over the output weights,
    plus ``(l2 + damping) I``. With ``include_bias`` a constant feature carries
    the bias. The score of a training point approximates the increase of the
    test loss when that point is left out.
    """

    def __init__(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        weight: np.ndarray,
        bias: np.ndarray | None = None,
        l2: float = 0.0,
        damping: float = 1e-3,
        include_bias: bool = False,
        ids: Sequence[int] | None = None,
    ):
        self.include_bias = include_bias
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(self.weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
        feats = self._features(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels)
        n, a = feats.shape
        c = self.weight.shape[1]
        p = self._probs(np.asarray(features, dtype=np.float64))
        h = np.zeros((a, c, a, c))
        for i in range(c):
            for j in range(i, c):
                s = p[:, i] * ((i == j) - p[:, j])
                block = (feats * s[:, None]).T @ feats
                h[:, i, :, j] = block
                h[:, j, :, i] = block
        h = h.reshape(a * c, a * c) + (l2 + damping) * np.eye(a * c)
        try:
            self.chol = cho_factor(h)
        except np.linalg.LinAlgError as e:
            raise np.linalg.LinAlgError("damped Hessian is not positive definite; increase damping") from e
        self.hessian = h
        sal = p.copy()
        sal[np.arange(n), labels] -= 1.0
        self.train_grads = (feats[:, :, None] * sal[:, None, :]).reshape(n, a * c)
        self.ids = list(range(n)) if ids is None else list(ids)
        self.row = {e: i for i, e in enumerate(self.ids)}

    def _features(self, feats: np.ndarray) -> np.ndarray:
        if self.include_bias:
            return np.hstack([feats, np.ones((feats.shape[0], 1))])
        return feats

    def _probs(self, feats: np.ndarray) -> np.ndarray:
        z = feats @ self.weight + self.bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def grad(self, feature: np.ndarray, label: int) -> np.ndarray:
        f = np.asarray(feature, dtype=np.float64)[None]
        s = self._probs(f)[0]
        s[label] -= 1.0
        return np.outer(self._features(f)[0], s).ravel()

    def score(self, train_id: int, test_grad: np.ndarray) -> float:
        """One pair, solving against the factored Hessian (O(p^2))."""
        return float(self.train_grads[self.row[train_id]] @ cho_solve(self.chol, test_grad))

    def scores(self, test_grad: np.ndarray) -> np.ndarray:
        return self.train_grads @ cho_solve(self.chol, test_grad)


def final_activations(model: Model, examples: Sequence[Example], chunk: int = 256) -> np.ndarray:
    out = [batch_grads(model, examples[i : i + chunk]).activation for i in range(0, len(examples), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.config.activation_dim))


def last_layer_influence(model: Model, train: Dataset, cfg: LastLayerInfluenceConfig = LastLayerInfluenceConfig()) -> LastLayerInfluence:
    feats = final_activations(model, list(train))
    return LastLayerInfluence(
        feats,
        train.labels,
        model.params["fc.weight"],
        model.params["fc.bias"],
        l2=model.config.l2_lambda,
        damping=cfg.damping,
        ids=train.ids,
    )


def influence_last(lli: LastLayerInfluence, model: Model, x_train: Example, x_test: Example) -> InfluenceResult:
    act = final_activations(model, [x_test])[0]
    g = lli.grad(act, x_test.label)
    return InfluenceResult(x_train.id, x_test.id, lli.score(x_train.id, g), "influence_last")


def representer_score(sal_train: np.ndarray, act_train: np.ndarray, act_test: np.ndarray, j: int, lam: float, n: int) -> float:
    """``-(1 / 2 lam n) * dl/df_j(x) * a(x).a(x')``; already positive for proponents."""
    return float(-(1.0 / (2.0 * lam * n)) * sal_train[j] * (act_train @ act_test))


def representer(
    model: Model, train: Dataset, x_train: Example, x_test: Example, cfg: LastLayerInfluenceConfig = LastLayerInfluenceConfig()
) -> InfluenceResult:
    bg = batch_grads(model, [x_train, x_test])
    j = x_test.label if cfg.target_class == "groundtruth" else int(np.argmax(bg.saliency[1]))
    s = representer_score(bg.saliency[0], bg.activation[0], bg.activation[1], j, cfg.lambda_rep, len(train))
    return InfluenceResult(x_train.id, x_test.id, s, "representer")


# ---------------------------------------------------------------- distances and ranking


def influence_distance(i_ab: float, i_aa: float, i_bb: float) -> float:
    if i_aa <= 0 or i_bb <= 0:
        raise ValueError(f"influence distance needs positive self-influence, got {i_aa} and {i_bb}")
    return max(1.0 - i_ab / math.sqrt(i_aa * i_bb), 0.0)


@dataclass
class DistanceMatrix:
    ids: list[int]
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.d.shape != (len(self.ids), len(self.ids)):
            raise ValueError("distance matrix shape does not match ids")


def distance_matrix(ids: Sequence[int], pair_score: Callable[[int, int], float]) -> DistanceMatrix:
    """Inf-dis over all pairs; ``pair_score`` must be symmetric."""
    ids = list(ids)
    n = len(ids)
    self_inf = [pair_score(i, i) for i in ids]
    d = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            d[a, b] = d[b, a] = influence_distance(pair_score(ids[a], ids[b]), self_inf[a], self_inf[b])
    return DistanceMatrix(ids, d)


@dataclass
class Ranking:
    test_id: int
    method: str
    ids: list[int]
    scores: np.ndarray

    @property
    def proponents(self) -> list[int]:
        return [self.ids[i] for i in np.lexsort((self.ids, -self.scores))] if self.ids else []

    @property
    def opponents(self) -> list[int]:
        return [self.ids[i] for i in np.lexsort((self.ids, self.scores))] if self.ids else []

    def score_of(self, example_id: int) -> float:
        return float(self.scores[self.ids.index(example_id)])


def rank(scores: Sequence[float], ids: Sequence[int], test_id: int = -1, method: str = "") -> Ranking:
    """Descending proponents and ascending opponents; ties broken by example id."""
    ids = [int(i) for i in ids]
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) != len(scores):
        raise ValueError("scores and ids differ in length")
    return Ranking(test_id, method, ids, scores)


# ---------------------------------------------------------------- scoring a test point against a candidate pool


class _WordIndex:
    """Inverted index word -> (rows, gradient matrix) for one checkpoint."""

    def __init__(self, records: Sequence[ExampleGradientRecord], dim: int):
        rows: dict[int, list[int]] = {}
        vecs: dict[int, list[np.ndarray]] = {}
        for r, rec in enumerate(records):
            for w, g in rec.word_grads.entries.items():
                rows.setdefault(w, []).append(r)
                vecs.setdefault(w, []).append(g)
        self.rows = {w: np.array(v) for w, v in rows.items()}
        self.mats = {w: np.stack(vecs[w]) for w in vecs}

    def accumulate(self, acc: np.ndarray, query: SparseWordGrad, eta: float, keep: Callable[[int], bool]) -> None:
        for w in sorted(query.entries):
            if w in self.rows and keep(w):
                acc[self.rows[w]] += eta * (self.mats[w] @ query.entries[w])


METHODS = (
    "tracin_we",
    "tracin_we_topk",
    "tracin_we_syn",
    "tracin_we_noc",
    "tracin_common",
    "tracin_last",
    "tracin_tfidf",
    "influence_last",
    "representer",
    "random",
)


class InfluenceContext:
    """Scores test examples against the training set under any registered method.

    Gradient stores for exact and top-k word gradients are built lazily and
    extended with test examples on demand. A method name prefixed with
    ``neg:`` negates the scores.
    """

    def __init__(
        self,
        ckpts: CheckpointSet,
        train: Dataset,
        vocab: Vocab | None = None,
        k: int = 10,
        last_cfg: LastLayerInfluenceConfig = LastLayerInfluenceConfig(),
        syn_cfg: SynConfig = SynConfig(),
        include_bias: bool = False,
        seed: int = 0,
    ):
        self.ckpts = ckpts
        self.train = train
        self.common = vocab.common_set if vocab is not None else SPECIAL_TOKEN_IDS
        self.k = k
        self.last_cfg = last_cfg
        self.syn_cfg = syn_cfg
        self.include_bias = include_bias
        self.seed = seed
        self._stores: dict[int | None, GradientStore] = {}
        self._indexes: dict[int | None, dict[int, _WordIndex]] = {}
        self._cache: dict[str, object] = {}
        self.train_ids = train.ids

    # ---- stores
    def store(self, k: int | None) -> GradientStore:
        if k not in self._stores:
            sel = self.ckpts.selected
            st = GradientStore(k, self.include_bias, self.ckpts.config.digest(), self.ckpts.config.embed_dim, [c.step for c in sel], [c.eta for c in sel])
            for c in sel:
                st.add(compute_records(c.model(self.ckpts.config), c.step, list(self.train), k, self.include_bias))
            self._stores[k] = st
        return self._stores[k]

    def ensure(self, examples: Sequence[Example], k: int | None) -> GradientStore:
        st = self.store(k)
        missing = [e for e in examples if not st.has(e.id)]
        if missing:
            for c in self.ckpts.selected:
                st.add(compute_records(c.model(self.ckpts.config), c.step, missing, k, self.include_bias))
        return st

    def _word_index(self, k: int | None) -> dict[int, _WordIndex]:
        if k not in self._indexes:
            st = self.store(k)
            self._indexes[k] = {s: _WordIndex([st.get(i, s) for i in self.train_ids], st.embed_dim) for s in st.steps}
        return self._indexes[k]

    def _fc_mats(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        if "fc" not in self._cache:
            st = self.store(None)
            self._cache["fc"] = {
                s: (np.stack([st.get(i, s).activation for i in self.train_ids]), np.stack([st.get(i, s).saliency for i in self.train_ids]))
                for s in st.steps
            }
        return self._cache["fc"]

    def model(self) -> Model:
        return self.ckpts.best_model()

    def last_layer(self) -> LastLayerInfluence:
        if "lli" not in self._cache:
            self._cache["lli"] = last_layer_influence(self.model(), self.train, self.last_cfg)
        return self._cache["lli"]

    def tfidf(self) -> TfIdfModel:
        if "tfidf" not in self._cache:
            self._cache["tfidf"] = tfidf_fit(self.train)
        return self._cache["tfidf"]

    def synonyms(self) -> SynonymTable:
        if "syn" not in self._cache:
            c = self.ckpts.selected[self.syn_cfg.checkpoint_index]
            self._cache["syn"] = SynonymTable(c.theta["embedding.weight"], self.syn_cfg.threshold)
        return self._cache["syn"]

    # ---- scoring
    def _we_scores(self, x: Example, k: int | None, token_filter: str) -> np.ndarray:
        st = self.ensure([x], k)
        keep = word_filter(token_filter, self.common)
        acc = np.zeros(len(self.train_ids))
        for s, eta in zip(st.steps, st.etas):
            self._word_index(k)[s].accumulate(acc, st.get(x.id, s).word_grads, eta, keep)
        return acc

    def scores(self, method: str, x: Example) -> np.ndarray:
        """Score of every training example (in ``train.ids`` order) for test example ``x``."""
        if method.startswith("neg:"):
            return -self.scores(method[4:], x)
        if method == "tracin_we":
            return self._we_scores(x, None, "all")
        if method == "tracin_we_topk":
            return self._we_scores(x, self.k, "all")
        if method == "tracin_we_noc":
            return self._we_scores(x, None, "no_common")
        if method == "tracin_common":
            return self._we_scores(x, None, "specials_only")
        if method in ("tracin_last", "tracin_tfidf"):
            st = self.ensure([x], None)
            out = np.zeros(len(self.train_ids))
            for s, eta in zip(st.steps, st.etas):
                acts, sals = self._fc_mats()[s]
                r = st.get(x.id, s)
                ss = sals @ r.saliency
                if method == "tracin_tfidf":
                    out += eta * ss
                else:
                    out += eta * (acts @ r.activation) * ss + (eta * ss if self.include_bias else 0.0)
            if method == "tracin_tfidf":
                tf = self.tfidf()
                out *= np.array([tfidf_cosine(tf, e, x) for e in self.train])
            return out
        if method == "tracin_we_syn":
            st = self.ensure([x], self.k)
            table = self.synonyms()
            return np.array([tracin_we_syn(st, i, x.id, table).score for i in self.train_ids])
        if method == "influence_last":
            lli = self.last_layer()
            act = final_activations(self.model(), [x])[0]
            return lli.scores(lli.grad(act, x.label))
        if method == "representer":
            m = self.model()
            lli = self.last_layer()
            act = final_activations(m, [x])[0]
            j = x.label if self.last_cfg.target_class == "groundtruth" else int(np.argmax(lli._probs(act[None])[0]))
            feats = final_activations(m, list(self.train))
            sal = lli._probs(feats)
            sal[np.arange(len(self.train)), self.train.labels] -= 1.0
            return -(1.0 / (2.0 * self.last_cfg.lambda_rep * len(self.train))) * sal[:, j] * (feats @ act)
        if method == "random":
            rng = np.random.default_rng([self.seed, int(x.id), 0x5EED])
            return rng.standard_normal(len(self.train_ids))
        if method.startswith("tracin:"):
            return self._dense_scores(method, x)
        raise ValueError(f"unknown influence method {method!r}; known: {METHODS} or 'tracin:<layer>[,<layer>]'")

    def _dense_scores(self, method: str, x: Example) -> np.ndarray:
        """``tracin:conv1,conv2`` style selections (embedding excluded) via dense per-example gradients."""
        layers = method.split(":", 1)[1].split(",")
        sel = LayerSelector(frozenset(layers), self.include_bias)
        out = np.zeros(len(self.train_ids))
        for c in self.ckpts.selected:
            m = c.model(self.ckpts.config)
            key = f"dense:{method}:{c.step}"
            if key not in self._cache:
                self._cache[key] = per_example_param_grads(m, list(self.train), sel)
            out += c.eta * (self._cache[key] @ param_grads(m, x, sel))
        return out

    def rank(self, method: str, x: Example) -> Ranking:
        return rank(self.scores(method, x), self.train_ids, x.id, method)


def write_jsonl(results: Iterable[InfluenceResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
