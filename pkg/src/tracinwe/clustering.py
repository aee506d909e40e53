"""Hard-example selection, influence-distance clustering, and cluster reports."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Dataset, Vocab
from .influence import DistanceMatrix, InfluenceContext, distance_matrix, tracin_we
from .textmodel import ModelConfig, TrainConfig, fit, predict_proba


@dataclass
class HardExampleSet:
    ids: list[int]
    rates: dict[int, float]  # misclassification rate of every scored example
    threshold: float
    runs: int

    def rate(self, example_id: int) -> float:
        return self.rates[example_id]


def misclassification_rates(
    train: Dataset,
    model_config: ModelConfig,
    hyper: TrainConfig,
    val: Dataset | None,
    runs: int = 20,
    base_seed: int = 0,
) -> tuple[dict[int, float], np.ndarray]:
    """Fraction of seeded runs whose best-validation checkpoint misclassifies each training example.

    Also returns the run-averaged predicted class distribution (examples x classes).
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    wrong = np.zeros(len(train))
    pred_hist = np.zeros((len(train), train.num_classes))
    labels = train.labels
    for r in range(runs):
        seed = base_seed + r
        ck = fit(replace(model_config, seed=seed), train, replace(hyper, seed=seed), val, selection_epochs=())
        pred = predict_proba(ck.best_model(), list(train)).argmax(axis=1)
        wrong += pred != labels
        pred_hist[np.arange(len(train)), pred] += 1
    return {i: float(w / runs) for i, w in zip(train.ids, wrong)}, pred_hist / runs


def select_hard(
    train: Dataset,
    model_config: ModelConfig,
    hyper: TrainConfig,
    val: Dataset | None = None,
    runs: int = 20,
    threshold: float = 0.4,
    base_seed: int = 0,
) -> HardExampleSet:
    """Examples misclassified in at least ``threshold`` of ``runs`` trainings (early stopping on ``val``)."""
    rates, _ = misclassification_rates(train, model_config, hyper, val, runs, base_seed)
    return HardExampleSet(hard_ids(rates, threshold), rates, threshold, runs)


def hard_ids(rates: dict[int, float], threshold: float) -> list[int]:
    return sorted(i for i, r in rates.items() if r >= threshold and r > 0)


# ---------------------------------------------------------------- agglomerative clustering


def agglomerative(dist: DistanceMatrix, threshold: float = 0.8, linkage: str = "average") -> list[list[int]]:
    """Merge the closest pair of clusters while their distance is at most ``threshold``.

    Average linkage via the Lance-Williams update. Among equally close pairs the
    one with the smallest member ids wins. Returns every cluster, singletons
    included, as sorted id lists ordered by smallest id.
    """
    if linkage not in ("average", "single", "complete"):
        raise ValueError(f"unknown linkage {linkage!r}")
    d = np.array(dist.d, dtype=np.float64)
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix is not symmetric")
    n = len(dist.ids)
    members = [[i] for i in dist.ids]
    key = [i for i in dist.ids]  # smallest id per cluster
    alive = np.ones(n, dtype=bool)
    d = d.copy()
    np.fill_diagonal(d, np.inf)
    sizes = np.ones(n)
    while alive.sum() > 1:
        sub = np.where(alive[:, None] & alive[None, :], d, np.inf)
        m = sub.min()
        if not m <= threshold:
            break
        cand = np.argwhere(sub == m)
        a, b = min(((int(i), int(j)) for i, j in cand if i < j), key=lambda p: (min(key[p[0]], key[p[1]]), max(key[p[0]], key[p[1]])))
        na, nb = sizes[a], sizes[b]
        if linkage == "average":
            new = (na * d[a] + nb * d[b]) / (na + nb)
        elif linkage == "single":
            new = np.minimum(d[a], d[b])
        else:
            new = np.maximum(d[a], d[b])
        d[a, :] = new
        d[:, a] = new
        d[a, a] = np.inf
        alive[b] = False
        d[b, :] = np.inf
        d[:, b] = np.inf
        sizes[a] = na + nb
        members[a] = members[a] + members[b]
        key[a] = min(key[a], key[b])
    out = [sorted(members[i]) for i in range(n) if alive[i]]
    return sorted(out, key=lambda c: c[0])


# ---------------------------------------------------------------- reports


def common_words(cluster: Sequence[int], pair_contribs: Callable[[int, int], dict[int, float]], top: int = 5) -> list[int]:
    """Words ranked by how many member pairs list them among their top contributors."""
    counts: Counter[int] = Counter()
    for a, b in combinations(sorted(cluster), 2):
        contribs = pair_contribs(a, b)
        ranked = sorted(contribs, key=lambda w: (-abs(contribs[w]), w))[:top]
        counts.update(ranked)
    return [w for w, _ in sorted(counts.items(), key=lambda t: (-t[1], t[0]))]


@dataclass
class ClusterReport:
    clusters: list[list[int]]
    common_words: list[list[int]]
    label_stats: list[dict[str, dict[int, int]]]
    min_size: int = 3
    threshold: float = 0.8

    def members(self) -> set[int]:
        return {i for c in self.clusters for i in c}

    def to_markdown(self, train: Dataset, vocab: Vocab | None = None, max_members: int = 5, n_words: int = 5) -> str:
        def name(w):
            return vocab.tokens[w] if vocab is not None else str(w)

        lines = [
            "| cluster | size | common words | given labels | predicted labels | members |",
            "|---|---|---|---|---|---|",
        ]
        for i, (c, words, st) in enumerate(zip(self.clusters, self.common_words, self.label_stats)):
            ws = ", ".join(name(w) for w in words[:n_words])
            given = ", ".join(f"{k}:{v}" for k, v in sorted(st["given"].items()))
            pred = ", ".join(f"{k}:{v}" for k, v in sorted(st["predicted"].items()))
            texts = "<br>".join(train.by_id(e).text.replace("|", "\\|") for e in c[:max_members])
            lines.append(f"| {i} | {len(c)} | {ws} | {given} | {pred} | {texts} |")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path, train: Dataset, vocab: Vocab | None = None) -> None:
        Path(path).write_text(self.to_markdown(train, vocab), "utf-8")


def cluster_hard_examples(
    ctx: InfluenceContext,
    hard: Sequence[int],
    threshold: float = 0.8,
    min_size: int = 3,
    predicted: dict[int, int] | None = None,
    top_words: int = 5,
) -> tuple[ClusterReport, DistanceMatrix]:
    """Inf-dis under TracIn-WE over the hard examples, then average-linkage clustering."""
    store = ctx.store(None)
    common = ctx.common

    def score(a, b):
        return tracin_we(store, a, b).score

    dist = distance_matrix(sorted(hard), score)
    clusters = [c for c in agglomerative(dist, threshold) if len(c) >= min_size]
    words = [common_words(c, lambda a, b: tracin_we(store, a, b, "no_common", common).word_contribs, top_words) for c in clusters]
    stats = []
    for c in clusters:
        given = Counter(ctx.train.by_id(i).label for i in c)
        pred = Counter(predicted[i] for i in c) if predicted else Counter()
        stats.append({"given": dict(given), "predicted": dict(pred)})
    return ClusterReport(clusters, words, stats, min_size, threshold), dist


def cluster_rates(report: ClusterReport, flagged: set[int], all_ids: Sequence[int]) -> tuple[float, float]:
    """Fraction of flagged and of unflagged examples that land in a reported cluster."""
    inside = report.members()
    flagged = set(flagged) & set(all_ids)
    clean = set(all_ids) - flagged
    f = len(inside & flagged) / len(flagged) if flagged else 0.0
    c = len(inside & clean) / len(clean) if clean else 0.0
    return f, c
