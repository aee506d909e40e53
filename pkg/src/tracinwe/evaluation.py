"""Case-deletion retraining, restricted no-overlap candidates, and targeted fixing.

Retrains are jobs keyed by (removal set, edits, seed). The model init and the
per-epoch data order both derive from the seed, and the order is a hash of
each surviving id, so a deletion retrain differs from its baseline only
through the removed examples.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Dataset, Example
from .influence import InfluenceContext, Ranking, tracin_we
from .similarity import TfIdfModel, tfidf_cosine
from .textmodel import ModelConfig, TrainConfig, epoch_order, fit, predict_proba

DEFAULT_K_GRID = (2, 5, 10, 20, 40)


# ---------------------------------------------------------------- retraining jobs


@dataclass(frozen=True)
class RetrainJob:
    removed: tuple[int, ...]
    seed: int
    edits: tuple[Example, ...] = ()  # replacement examples (same ids)

    @property
    def key(self) -> tuple:
        return (self.removed, self.seed, tuple((e.id, e.token_ids) for e in self.edits))


@dataclass
class RetrainSetup:
    train: Dataset
    model_config: ModelConfig
    hyper: TrainConfig
    probes: list[Example]  # examples whose class probabilities are recorded
    eval_set: list[Example] = field(default_factory=list)  # for accuracy


@dataclass
class RetrainResult:
    probs: np.ndarray  # n_probes x C
    eval_accuracy: float


def run_job(setup: RetrainSetup, job: RetrainJob) -> RetrainResult:
    data = setup.train.without(job.removed)
    if job.edits:
        data = data.with_replaced(job.edits)
    cfg = replace(setup.model_config, seed=job.seed)
    hyper = replace(setup.hyper, seed=job.seed)
    model = fit(cfg, data, hyper, selection_epochs=(), universe=setup.train.ids).final_model()
    probs = predict_proba(model, setup.probes)
    acc = float("nan")
    if setup.eval_set:
        p = predict_proba(model, setup.eval_set).argmax(axis=1)
        acc = float(np.mean(p == np.array([e.label for e in setup.eval_set])))
    return RetrainResult(probs, acc)


def _run_one(args):
    return run_job(*args)


class JobRunner:
    """Runs retrain jobs serially or in a process pool, memoizing by job key."""

    def __init__(self, setup: RetrainSetup, n_jobs: int = 1):
        self.setup = setup
        self.n_jobs = max(1, int(n_jobs))
        self.cache: dict[tuple, RetrainResult] = {}
        self.n_trained = 0

    def run(self, jobs: Sequence[RetrainJob]) -> list[RetrainResult]:
        todo, seen = [], set()
        for j in jobs:
            if j.key not in self.cache and j.key not in seen:
                seen.add(j.key)
                todo.append(j)
        if self.n_jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(self.n_jobs) as ex:
                results = list(ex.map(_run_one, [(self.setup, j) for j in todo]))
        else:
            results = [run_job(self.setup, j) for j in todo]
        for j, r in zip(todo, results):
            self.cache[j.key] = r
        self.n_trained += len(todo)
        return [self.cache[j.key] for j in jobs]

    def prob(self, job: RetrainJob, probe: Example) -> float:
        i = next(n for n, e in enumerate(self.setup.probes) if e.id == probe.id)
        return float(self.run([job])[0].probs[i, probe.label])


def order_checksum(ids: Iterable[int], seed: int, epochs: int) -> str:
    """Digest of the training order across epochs, for asserting baseline/deletion alignment."""
    import hashlib

    ids = np.asarray(list(ids), dtype=np.int64)
    h = hashlib.sha256()
    for ep in range(1, epochs + 1):
        h.update(ids[epoch_order(ids, seed, ep)].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- deletion curves


def auc(values: Sequence[float], k_grid: Sequence[int]) -> float:
    if len(k_grid) == 0:
        raise ValueError("empty k grid")
    if len(values) != len(k_grid):
        raise ValueError("curve and grid lengths differ")
    return math.fsum(values) / len(k_grid)


def bootstrap_stderr(samples: np.ndarray, n_boot: int = 1000, seed: int = 0) -> float:
    """Bootstrap standard error of the mean over the first axis."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(samples), size=(n_boot, len(samples)))
    return float(samples[idx].mean(axis=1).std(ddof=1))


@dataclass
class DeletionCurve:
    test_id: int
    method: str
    k_grid: list[int]
    del_plus: list[float]
    del_minus: list[float]
    repeats: int
    auc_plus: float
    auc_minus: float
    per_seed_plus: list[list[float]]  # k x repeats
    per_seed_minus: list[list[float]]
    stderr_plus: list[float]
    stderr_minus: list[float]
    auc_stderr_plus: float
    auc_stderr_minus: float

    def to_json(self) -> dict:
        return asdict(self)


def deletion_eval(
    x_test: Example,
    ranking: Ranking,
    runner: JobRunner,
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    repeats: int = 5,
    base_seed: int = 0,
    n_boot: int = 1000,
) -> DeletionCurve:
    """Retrain without the top-k proponents / opponents and record the change in
    the test example's groundtruth-class probability, paired per seed."""
    n_train = len(runner.setup.train)
    if any(k >= n_train for k in k_grid):
        raise ValueError(f"k grid {list(k_grid)} reaches the training set size {n_train}")
    seeds = [base_seed + r for r in range(repeats)]
    base = [runner.prob(RetrainJob((), s), x_test) for s in seeds]
    pros, opps = ranking.proponents, ranking.opponents
    jobs = [RetrainJob(tuple(sorted(lst[:k])), s) for lst in (pros, opps) for k in k_grid for s in seeds if k > 0]
    runner.run(jobs)

    def per_seed(lst):
        return [[(runner.prob(RetrainJob(tuple(sorted(lst[:k])), s), x_test) - b) if k > 0 else 0.0 for s, b in zip(seeds, base)] for k in k_grid]

    plus, minus = per_seed(pros), per_seed(opps)
    dp = [math.fsum(r) / repeats for r in plus]
    dm = [math.fsum(r) / repeats for r in minus]
    # per-seed AUCs, so the AUC error reflects retrain variance
    auc_p = np.array(plus).mean(axis=0)
    auc_m = np.array(minus).mean(axis=0)
    return DeletionCurve(
        x_test.id,
        ranking.method,
        list(k_grid),
        dp,
        dm,
        repeats,
        auc(dp, k_grid),
        auc(dm, k_grid),
        plus,
        minus,
        [bootstrap_stderr(np.array(r), n_boot, base_seed) for r in plus],
        [bootstrap_stderr(np.array(r), n_boot, base_seed) for r in minus],
        bootstrap_stderr(auc_p, n_boot, base_seed),
        bootstrap_stderr(auc_m, n_boot, base_seed),
    )


@dataclass
class AucComparison:
    """Paired comparison of two methods' AUCs over the same test points."""

    method_a: str
    method_b: str
    mean_a: float
    mean_b: float
    diff: float  # mean(a - b)
    stderr: float  # bootstrap over test points of the paired difference


def compare_auc(curves_a: Sequence[DeletionCurve], curves_b: Sequence[DeletionCurve], which: str, n_boot: int = 2000, seed: int = 0) -> AucComparison:
    if [c.test_id for c in curves_a] != [c.test_id for c in curves_b]:
        raise ValueError("curves must cover the same test points in the same order")
    a = np.array([getattr(c, f"auc_{which}") for c in curves_a])
    b = np.array([getattr(c, f"auc_{which}") for c in curves_b])
    return AucComparison(
        curves_a[0].method if curves_a else "",
        curves_b[0].method if curves_b else "",
        float(a.mean()),
        float(b.mean()),
        float((a - b).mean()),
        bootstrap_stderr(a - b, n_boot, seed),
    )


def write_curves_csv(curve: DeletionCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["k", "del_plus", "del_minus", "stderr_plus", "stderr_minus"])
        for row in zip(curve.k_grid, curve.del_plus, curve.del_minus, curve.stderr_plus, curve.stderr_minus):
            w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def plot_curves(curves: Sequence[DeletionCurve], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for c in curves:
        ax.errorbar(c.k_grid, c.del_plus, yerr=c.stderr_plus, marker="o", label=f"{c.method} del+")
        ax.errorbar(c.k_grid, c.del_minus, yerr=c.stderr_minus, marker="s", linestyle="--", label=f"{c.method} del-")
    ax.axhline(0, color="grey", lw=0.5)
    ax.set_xlabel("k removed")
    ax.set_ylabel("change in groundtruth prob")
    ax.set_title(f"test example {curves[0].test_id}" if curves else "")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------- restricted protocol


def no_overlap_candidates(x_test: Example, train: Dataset, n: int, tfidf: TfIdfModel) -> Dataset:
    """The ``n`` training examples least similar to ``x_test`` under TF-IDF (ties by id)."""
    sims = [(tfidf_cosine(tfidf, e, x_test), e.id) for e in train]
    keep = sorted(sims)[:n]
    return train.subset(sorted(i for _, i in keep))


def restrict(ranking: Ranking, ids: Iterable[int]) -> Ranking:
    keep = set(ids)
    idx = [i for i, e in enumerate(ranking.ids) if e in keep]
    return Ranking(ranking.test_id, ranking.method, [ranking.ids[i] for i in idx], ranking.scores[idx])


# ---------------------------------------------------------------- targeted fixing


@dataclass
class FixReport:
    test_id: int
    method: str
    strategy: str  # remove_examples | pad_word
    k_grid: list[int]
    fix_prob: list[float]
    accuracy_delta: list[float]
    edits: list[list[tuple[int, int]]] = field(default_factory=list)  # per k: (train id, position) padded

    def to_json(self) -> dict:
        return asdict(self)


def most_negative_word(ctx: InfluenceContext, train_ex: Example, x_test: Example) -> int | None:
    """Non-special shared word with the most negative TracIn-WE contribution."""
    st = ctx.ensure([x_test], None)
    contribs = tracin_we(st, train_ex.id, x_test.id, "no_common", ()).word_contribs
    if not contribs:
        return None
    return min(sorted(contribs), key=lambda w: contribs[w])


def pad_first(ex: Example, word: int) -> tuple[Example, int]:
    ids = list(ex.token_ids)
    pos = ids.index(word)
    ids[pos] = 0
    return replace(ex, token_ids=tuple(ids)), pos


def in_band(prob: float, band: tuple[float, float]) -> bool:
    return band[0] <= prob <= band[1]


def fix_eval(
    x_test: Example,
    ranking: Ranking,
    runner: JobRunner,
    strategy: str = "remove_examples",
    k_grid: Sequence[int] = (10,),
    repeats: int = 5,
    base_seed: int = 0,
    ctx: InfluenceContext | None = None,
) -> FixReport:
    """Fraction of retrains that classify ``x_test`` correctly after acting on its top-k opponents."""
    if strategy not in ("remove_examples", "pad_word"):
        raise ValueError(f"unknown fixing strategy {strategy!r}")
    opps = ranking.opponents
    if not opps:
        raise ValueError(f"no opponents available for test example {x_test.id}")
    seeds = [base_seed + r for r in range(repeats)]
    base_acc = np.mean([r.eval_accuracy for r in runner.run([RetrainJob((), s) for s in seeds])])
    fix, dacc, edits = [], [], []
    train = runner.setup.train
    for k in k_grid:
        if strategy == "remove_examples" or k == 0:
            jobs = [RetrainJob(tuple(sorted(opps[:k])), s) for s in seeds]
            edits.append([])
        else:
            if ctx is None:
                raise ValueError("pad_word needs an influence context for word contributions")
            new, ed = [], []
            for oid in opps:
                if len(new) == k:
                    break
                ex = train.by_id(oid)
                w = most_negative_word(ctx, ex, x_test)
                if w is None:
                    continue
                e2, pos = pad_first(ex, w)
                new.append(e2)
                ed.append((oid, pos))
            jobs = [RetrainJob((), s, tuple(sorted(new, key=lambda e: e.id))) for s in seeds]
            edits.append(ed)
        res = runner.run(jobs)
        i = next(n for n, e in enumerate(runner.setup.probes) if e.id == x_test.id)
        fix.append(float(np.mean([int(np.argmax(r.probs[i])) == x_test.label for r in res])))
        dacc.append(float(np.mean([r.eval_accuracy for r in res]) - base_acc))
    return FixReport(x_test.id, ranking.method, strategy, list(k_grid), fix, dacc, edits)


def write_summary(path: str | Path, obj: dict) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float), "utf-8")
