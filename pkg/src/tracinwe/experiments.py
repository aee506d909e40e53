"""Desk-scale experiment runners shared by the scripts and the acceptance tests.

Each runner builds its own setup from a frozen config, so results depend only
on the config and are reproducible run to run.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import pearsonr

from .clustering import ClusterReport, cluster_hard_examples, cluster_rates, hard_ids, misclassification_rates
from .corpus import Dataset, Example
from .desk import Desk, DeskConfig, build_desk
from .diagnostics import CancellationReport, LayerCosineReport, cancellation_ratio, layer_grad_cosine
from .evaluation import (
    DEFAULT_K_GRID,
    AucComparison,
    DeletionCurve,
    JobRunner,
    RetrainJob,
    RetrainSetup,
    bootstrap_stderr,
    compare_auc,
    deletion_eval,
    fix_eval,
)
from .gradients import GradientStore, compute_records
from .influence import InfluenceContext, LastLayerInfluence, LastLayerInfluenceConfig, influence_last, last_layer_influence, tracin_last, tracin_we
from .synth import SynthConfig
from .textmodel import TrainConfig, fit, predict_proba

# Smaller desk for the retraining experiments: half the corpus trains, so one
# retrain takes well under a second and 40 removals are a visible fraction.
RETRAIN_DESK = DeskConfig(
    synth=SynthConfig(n_examples=2000),
    fractions=(0.5, 0.1, 0.4),
    hyper=TrainConfig(epochs=6, batch_size=32, lr=0.05, momentum=0.9),
)


# ---------------------------------------------------------------- diagnostics


@dataclass
class DiagnosticsResult:
    reports: dict[str, CancellationReport]
    cosine: LayerCosineReport
    seconds: float

    @property
    def bias_weight_ratio(self) -> float:
        return self.reports["bias"].ratio / self.reports["weight"].ratio


def run_diagnostics(cfg: DeskConfig = DeskConfig(), n_pairs: int = 200, seed: int = 0, desk: Desk | None = None) -> DiagnosticsResult:
    t0 = time.perf_counter()
    desk = desk or build_desk(cfg)
    groups = ["bias", "weight"] + desk.model_config.layer_names
    reports = {g: cancellation_ratio(desk.ckpts, desk.train, g) for g in groups}
    cosine = layer_grad_cosine(desk.ckpts.final_model(), desk.train, n_pairs, seed)
    return DiagnosticsResult(reports, cosine, time.perf_counter() - t0)


# ---------------------------------------------------------------- deletion


@dataclass
class DeletionResult:
    test_ids: list[int]
    curves: dict[str, list[DeletionCurve]]
    comparisons: dict[str, AucComparison] = field(default_factory=dict)  # "plus" / "minus", first method vs second
    retrains: int = 0
    seconds: float = 0.0


def band_test_points(runner: JobRunner, pool: Sequence[Example], band: tuple[float, float], repeats: int, base_seed: int) -> list[Example]:
    """Pool examples whose groundtruth probability, averaged over unablated retrains, lies strictly inside ``band``."""
    res = runner.run([RetrainJob((), base_seed + r) for r in range(repeats)])
    rows = np.arange(len(pool))
    labels = [e.label for e in pool]
    probs = np.mean([r.probs[rows, labels] for r in res], axis=0)
    return [e for e, p in zip(pool, probs) if band[0] < p < band[1]]


def run_deletion(
    cfg: DeskConfig = RETRAIN_DESK,
    methods: Sequence[str] = ("tracin_we", "tracin_last"),
    n_test: int = 12,
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    repeats: int = 5,
    band: tuple[float, float] = (0.1, 0.9),
    base_seed: int = 0,
    desk: Desk | None = None,
) -> DeletionResult:
    t0 = time.perf_counter()
    desk = desk or build_desk(cfg)
    ctx = InfluenceContext(desk.ckpts, desk.train, desk.vocab)
    pool = list(desk.test)
    runner = JobRunner(RetrainSetup(desk.train, desk.model_config, cfg.hyper, pool))
    tests = band_test_points(runner, pool, band, repeats, base_seed)[:n_test]
    curves = {m: [deletion_eval(x, ctx.rank(m, x), runner, k_grid, repeats, base_seed) for x in tests] for m in methods}
    out = DeletionResult([x.id for x in tests], curves, retrains=runner.n_trained)
    if len(methods) >= 2 and tests:
        out.comparisons = {w: compare_auc(curves[methods[0]], curves[methods[1]], w) for w in ("plus", "minus")}
    out.seconds = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------- fixing


@dataclass
class FixingResult:
    test_ids: list[int]
    k_grid: list[int]
    fix_prob: dict[str, np.ndarray]  # method -> points x k
    seconds: float = 0.0

    def difference(self, a: str, b: str, k_index: int = -1) -> tuple[float, float]:
        """Mean and bootstrap stderr over test points of the paired fix-probability difference."""
        d = self.fix_prob[a][:, k_index] - self.fix_prob[b][:, k_index]
        return float(d.mean()), bootstrap_stderr(d, 2000, 0)


def misclassified_in_band(desk: Desk, band: tuple[float, float]) -> list[Example]:
    """Held-out examples the trained model gets wrong with groundtruth probability inside ``band``."""
    pool = list(desk.val) + list(desk.test)
    probs = predict_proba(desk.ckpts.final_model(), pool)
    return [e for e, p in zip(pool, probs) if p.argmax() != e.label and band[0] <= p[e.label] <= band[1]]


def run_fixing(
    cfg: DeskConfig = RETRAIN_DESK,
    methods: Sequence[str] = ("tracin_we", "random"),
    k_grid: Sequence[int] = (0, 40),
    repeats: int = 5,
    band: tuple[float, float] = (0.3, 0.7),
    strategy: str = "remove_examples",
    max_points: int | None = None,
    base_seed: int = 0,
    desk: Desk | None = None,
) -> FixingResult:
    t0 = time.perf_counter()
    desk = desk or build_desk(cfg)
    ctx = InfluenceContext(desk.ckpts, desk.train, desk.vocab)
    cand = misclassified_in_band(desk, band)[:max_points]
    runner = JobRunner(RetrainSetup(desk.train, desk.model_config, cfg.hyper, cand, list(desk.train)))
    probs = {
        m: np.array([fix_eval(x, ctx.rank(m, x), runner, strategy, k_grid, repeats, base_seed, ctx).fix_prob for x in cand]).reshape(len(cand), len(k_grid))
        for m in methods
    }
    return FixingResult([x.id for x in cand], list(k_grid), probs, time.perf_counter() - t0)


# ---------------------------------------------------------------- clustering


@dataclass
class ClusteringResult:
    hard: list[int]
    flipped: set[int]
    report: ClusterReport
    flipped_rate: float
    clean_rate: float
    seconds: float = 0.0


def run_clustering(
    cfg: DeskConfig = DeskConfig(synth=SynthConfig(n_examples=2500, flip_rate=0.05)),
    runs: int = 20,
    hard_threshold: float = 0.4,
    patience: int = 3,
    cluster_threshold: float = 0.8,
    min_size: int = 3,
) -> ClusteringResult:
    t0 = time.perf_counter()
    desk = build_desk(cfg)
    flipped = set(desk.corpus.flipped) & set(desk.train.ids)
    rates, pred = misclassification_rates(desk.train, desk.model_config, replace(cfg.hyper, patience=patience), desk.val, runs)
    hard = hard_ids(rates, hard_threshold)
    ctx = InfluenceContext(desk.ckpts, desk.train, desk.vocab)
    predicted = {i: int(pred[n].argmax()) for n, i in enumerate(desk.train.ids)}
    report, _ = cluster_hard_examples(ctx, hard, cluster_threshold, min_size, predicted)
    f, c = cluster_rates(report, flipped, desk.train.ids)
    return ClusteringResult(hard, flipped, report, f, c, time.perf_counter() - t0)


# ---------------------------------------------------------------- timing


def bench_timings(
    train: Dataset,
    tests: Sequence[Example],
    config,
    hyper: TrainConfig,
    width: int = 256,
    k: int = 10,
    n_pairs: int = 200,
    seed: int = 0,
    damping: float = 1e-3,
    selection_epochs: Sequence[int] = (1, 2, 3),
    rounds: int = 5,
) -> dict[str, float]:
    """Preprocessing and per-pair query cost of the gradient-based scorers.

    The last conv layer is widened to ``width`` filters so the output layer is
    large enough for the inverse-Hessian solve to matter. Every query goes
    through the per-pair API with nothing cached across pairs.
    """
    specs = list(config.conv_specs)
    specs[-1] = (specs[-1][0], width)
    wide = replace(config, conv_specs=tuple(specs))
    ckpts = fit(wide, train, hyper, selection_epochs=selection_epochs)
    examples, tests = list(train), list(tests)
    out: dict[str, float] = {}
    stores = {}
    for name, kk in (("exact", None), ("topk", k)):
        st = GradientStore(kk, False, wide.digest(), wide.embed_dim, [c.step for c in ckpts.selected], [c.eta for c in ckpts.selected])
        t0 = time.perf_counter()
        for c in ckpts.selected:
            st.add(compute_records(c.model(wide), c.step, examples + tests, kk, False))
        out[f"preprocess_{name}_sec_per_point"] = (time.perf_counter() - t0) / (len(examples) + len(tests))
        stores[name] = st
    model = ckpts.final_model()
    t0 = time.perf_counter()
    lli = last_layer_influence(model, train, LastLayerInfluenceConfig(damping))
    out["preprocess_influence_last_sec_total"] = time.perf_counter() - t0
    rng = np.random.default_rng(seed)
    pairs = [(examples[int(i)], tests[int(j)]) for i, j in zip(rng.integers(0, len(examples), n_pairs), rng.integers(0, len(tests), n_pairs))]
    per_pair = {
        "tracin_last": lambda a, b: tracin_last(stores["exact"], a.id, b.id),
        "tracin_we": lambda a, b: tracin_we(stores["exact"], a.id, b.id),
        "tracin_we_topk": lambda a, b: tracin_we(stores["topk"], a.id, b.id),
        "influence_last": lambda a, b: influence_last(lli, model, a, b),
    }
    for name, fn in per_pair.items():
        fn(*pairs[0])  # warm up
        best = math.inf
        for _ in range(rounds):  # best of several rounds, as timeit does
            t0 = time.perf_counter()
            for a, b in pairs:
                fn(a, b)
            best = min(best, time.perf_counter() - t0)
        out[f"{name}_sec_per_pair"] = best / len(pairs)
    out["last_layer_params"] = int(wide.activation_dim * wide.num_classes)
    return out


# ---------------------------------------------------------------- convex sanity check


@dataclass
class LogRegCheck:
    predicted: np.ndarray  # influence score per training point
    actual: np.ndarray  # test-loss change when that point is left out
    pearson: float


def _fit_logreg(x: np.ndarray, y: np.ndarray, l2: float, w0: np.ndarray) -> np.ndarray:
    """Two-class softmax regression with a bias feature, minimising summed loss + l2/2 |W|^2."""
    xa = np.hstack([x, np.ones((len(x), 1))])
    shape = (xa.shape[1], 2)

    def f(wflat):
        w = wflat.reshape(shape)
        z = xa @ w
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        p = np.exp(logp)
        p[np.arange(len(y)), y] -= 1.0
        val = -logp[np.arange(len(y)), y].sum() + 0.5 * l2 * wflat @ wflat
        return val, (xa.T @ p).ravel() + l2 * wflat

    res = minimize(f, w0.ravel(), jac=True, method="L-BFGS-B", options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10000})
    return res.x.reshape(shape)


def _logloss(w: np.ndarray, x: np.ndarray, y: int) -> float:
    z = np.append(x, 1.0) @ w
    return float(np.logaddexp.reduce(z) - z[y])


def logistic_loo_check(n: int = 50, l2: float = 0.1, seed: int = 0) -> LogRegCheck:
    """Influence scores against exact leave-one-out retraining on a small convex problem."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    y = (x @ np.array([1.5, -1.0]) + 0.8 * rng.normal(size=n) > 0).astype(int)
    x_test = rng.normal(size=2)
    y_test = int(x_test @ np.array([1.5, -1.0]) > 0)
    w = _fit_logreg(x, y, l2, np.zeros((3, 2)))
    lli = LastLayerInfluence(x, y, w[:2], w[2], l2=l2, damping=0.0, include_bias=True)
    g = lli.grad(x_test, y_test)
    predicted = np.array([lli.score(i, g) for i in range(n)])
    base = _logloss(w, x_test, y_test)
    actual = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        actual[i] = _logloss(_fit_logreg(x[keep], y[keep], l2, w), x_test, y_test) - base
    r = float(pearsonr(predicted, actual)[0]) if np.std(actual) > 0 else math.nan
    return LogRegCheck(predicted, actual, r)
