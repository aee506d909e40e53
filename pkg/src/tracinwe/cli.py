"""Command-line entry point: ``tracinwe <command> [--config run.toml] [--key value ...]``.

Every command reads a flat TOML file of RunConfig keys, applies flag
overrides, validates everything up front, and writes into its own
subdirectory of the workdir together with the exact config and a hash of the
code that produced it. Exit codes: 0 ok, 2 invalid config, 3 runtime failure
(the command directory then holds a FAILED marker).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import time
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

import numpy as np

from . import __version__
from .corpus import ConfigError, Dataset, Vocab, build_vocab, load_dataset, split, write_dataset
from .synth import SynthConfig, make_corpus
from .textmodel import ModelConfig, TrainConfig, fit, load_checkpoints, predict_proba, save_checkpoints

log = logging.getLogger("tracinwe")

WORKDIR_ENV = "TRACINWE_WORKDIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunConfig:
    workdir: str = "runs/default"
    # data: a corpus file, or a synthetic corpus when empty
    corpus: str = ""
    corpus_format: str = ""
    synth_examples: int = 2500
    synth_classes: int = 4
    synth_flip_rate: float = 0.0
    synth_seed: int = 0
    fractions: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    max_vocab: int = 20000
    # model and training
    embed_dim: int = 128
    conv_specs: list[list[int]] = field(default_factory=lambda: [[5, 10], [5, 10], [1, 10]])
    l2_lambda: float = 0.0
    freeze_embeddings: bool = False
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    selection_epochs: list[int] = field(default_factory=lambda: [1, 2, 3])
    # influence
    methods: list[str] = field(default_factory=lambda: ["tracin_we", "tracin_last"])
    topk: int = 10
    include_bias: bool = False
    damping: float = 1e-3
    lambda_rep: float = 1e-3
    syn_threshold: float = 0.7
    test_ids: list[int] = field(default_factory=list)
    n_test: int = 5
    report_top: int = 10
    store_dtype: str = "f32"
    # deletion evaluation
    k_grid: list[int] = field(default_factory=lambda: [2, 5, 10, 20, 40])
    repeats: int = 5
    retrain_seed: int = 1000
    test_band: list[float] = field(default_factory=lambda: [0.1, 0.9])
    restricted_candidates: int = 0
    n_jobs: int = 1
    # diagnostics
    cosine_pairs: int = 200
    # clustering
    hard_runs: int = 20
    hard_threshold: float = 0.4
    patience: int = 3
    cluster_threshold: float = 0.8
    min_cluster_size: int = 3
    # fixing
    fix_band: list[float] = field(default_factory=lambda: [0.3, 0.7])
    fix_k: list[int] = field(default_factory=lambda: [0, 40])
    fix_strategies: list[str] = field(default_factory=lambda: ["remove_examples", "pad_word"])
    fix_methods: list[str] = field(default_factory=lambda: ["tracin_we", "random"])
    n_fix: int = 20
    # benchmark
    bench_width: int = 256
    bench_pairs: int = 200

    def validate(self) -> None:
        from .influence import METHODS

        p = []
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9 or min(self.fractions) < 0:
            p.append("fractions must be three nonnegative numbers summing to 1")
        for name in ("synth_examples", "synth_classes", "embed_dim", "epochs", "batch_size", "repeats", "topk", "hard_runs", "n_jobs", "bench_width", "bench_pairs"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1")
        if self.synth_classes < 2:
            p.append("synth_classes must be >= 2")
        if not 0 <= self.synth_flip_rate < 1:
            p.append("synth_flip_rate must be in [0, 1)")
        if not self.lr > 0:
            p.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            p.append("momentum must be in [0, 1)")
        if any(len(s) != 2 or min(s) < 1 for s in self.conv_specs) or not self.conv_specs:
            p.append("conv_specs must be a non-empty list of [kernel, filters] pairs")
        for m in self.methods + self.fix_methods:
            base = m[4:] if m.startswith("neg:") else m
            if base not in METHODS and not base.startswith("tracin:"):
                p.append(f"unknown method {m!r}")
        if any(k < 0 for k in self.k_grid) or not self.k_grid:
            p.append("k_grid must be non-empty and nonnegative")
        for name in ("test_band", "fix_band"):
            b = getattr(self, name)
            if len(b) != 2 or not 0 <= b[0] <= b[1] <= 1:
                p.append(f"{name} must be [lo, hi] with 0 <= lo <= hi <= 1")
        if self.damping < 0:
            p.append("damping must be >= 0")
        if self.lambda_rep <= 0:
            p.append("lambda_rep must be > 0")
        if not 0 < self.syn_threshold <= 1:
            p.append("syn_threshold must be in (0, 1]")
        if not 0 <= self.hard_threshold <= 1:
            p.append("hard_threshold must be in [0, 1]")
        if self.store_dtype not in ("f32", "f64"):
            p.append("store_dtype must be f32 or f64")
        if self.corpus and not Path(self.corpus).exists():
            p.append(f"corpus file {self.corpus} does not exist")
        if self.corpus_format not in ("", "tsv", "jsonl"):
            p.append("corpus_format must be tsv or jsonl")
        for s in self.fix_strategies:
            if s not in ("remove_examples", "pad_word"):
                p.append(f"unknown fix strategy {s!r}")
        if p:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(p))

    # ---- derived configs
    def model_config(self, vocab_size: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            vocab_size,
            num_classes,
            embed_dim=self.embed_dim,
            conv_specs=tuple(tuple(s) for s in self.conv_specs),
            l2_lambda=self.l2_lambda,
            freeze_embeddings=self.freeze_embeddings,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, 1, self.seed)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- config loading


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def _coerce(name: str, value: Any, typ) -> Any:
    origin = getattr(typ, "__origin__", None)
    if origin is list:
        if isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else [v for v in value.split(",") if v != ""]
        inner = typ.__args__[0]
        return [_coerce(name, v, inner) for v in value]
    if typ is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {getattr(typ, '__name__', typ)}") from None


def make_config(file_values: dict, overrides: dict) -> RunConfig:
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted((set(file_values) | set(overrides)) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for src in (file_values, overrides):
        for k, v in src.items():
            if v is not None:
                values[k] = _coerce(k, v, hints[k])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def dump_json(obj: Any, path: Path) -> None:
    """Deterministic JSON: sorted keys, shortest round-trip float repr."""
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n", "utf-8")


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


# ---------------------------------------------------------------- workdir state


@dataclass
class Run:
    cfg: RunConfig
    root: Path

    def out(self, name: str) -> Path:
        d = self.root / name
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        dump_json({"config": self.cfg.to_json(), "code_hash": code_hash(), "version": __version__}, d / "config.json")
        return d

    def need(self, name: str) -> Path:
        d = self.root / name
        if not d.exists() or (d / "FAILED").exists():
            raise ConfigError(f"{d} is missing or failed; run the '{name}' command first")
        return d

    def data(self) -> tuple[Vocab, Dataset, Dataset, Dataset, dict]:
        d = self.need("train")
        vocab = Vocab.load(d / "vocab.json")
        meta = json.loads((d / "data_meta.json").read_text("utf-8"))
        label_map = meta["label_map"]
        parts = [load_dataset(d / f"{s}.jsonl", "jsonl", label_map, vocab, s)[0] for s in ("train", "val", "test")]
        return vocab, parts[0], parts[1], parts[2], meta

    def ckpts(self):
        return load_checkpoints(self.need("train") / "checkpoints")


def _retrain_runner(run: Run, train: Dataset, probes, eval_set=()):
    from .evaluation import JobRunner, RetrainSetup

    ckpts = run.ckpts()
    return JobRunner(RetrainSetup(train, ckpts.config, run.cfg.train_config(), list(probes), list(eval_set)), run.cfg.n_jobs)


def _context(run: Run, vocab, train, ckpts=None):
    from .influence import InfluenceContext, LastLayerInfluenceConfig
    from .similarity import SynConfig

    c = run.cfg
    return InfluenceContext(
        ckpts or run.ckpts(),
        train,
        vocab,
        k=c.topk,
        last_cfg=LastLayerInfluenceConfig(c.damping, c.lambda_rep),
        syn_cfg=SynConfig(c.syn_threshold),
        include_bias=c.include_bias,
        seed=c.seed,
    )


def _test_points(run: Run, test: Dataset) -> list:
    c = run.cfg
    if c.test_ids:
        return [test.by_id(i) for i in c.test_ids]
    return list(test)[: c.n_test]


# ---------------------------------------------------------------- commands


def cmd_train(run: Run) -> Path:
    c = run.cfg
    out = run.out("train")
    flipped: list[int] = []
    if c.corpus:
        ds, label_map = load_dataset(c.corpus, c.corpus_format or None)
    else:
        sc = make_corpus(SynthConfig(n_examples=c.synth_examples, num_classes=c.synth_classes, flip_rate=c.synth_flip_rate, seed=c.synth_seed))
        ds, label_map = sc.dataset, {str(i): i for i in range(c.synth_classes)}
        flipped = sorted(sc.flipped)
    tr, va, te = split(ds, c.split_seed, tuple(c.fractions))
    vocab = build_vocab([e.text for e in tr], max_size=c.max_vocab)
    vocab.save(out / "vocab.json")
    for name, part in (("train", tr), ("val", va), ("test", te)):
        write_dataset(part, out / f"{name}.jsonl")
    # split files store class ids, so reloading uses the identity map
    names = {str(v): k for k, v in label_map.items()}
    meta = {"label_map": {str(i): i for i in range(ds.num_classes)}, "label_names": names, "flipped": flipped, "num_classes": ds.num_classes}
    dump_json(meta, out / "data_meta.json")
    tr, va, te = tr.encode(vocab), va.encode(vocab), te.encode(vocab)
    ckpts = fit(c.model_config(len(vocab), ds.num_classes), tr, c.train_config(), selection_epochs=c.selection_epochs)
    save_checkpoints(ckpts, out / "checkpoints")
    model = ckpts.final_model()
    acc = {n: float(np.mean(predict_proba(model, list(p)).argmax(1) == p.labels)) for n, p in (("train", tr), ("val", va), ("test", te))}
    dump_json({"accuracy": acc, "n_checkpoints": len(ckpts.checkpoints), "selection": ckpts.selection}, out / "summary.json")
    return out


def cmd_grads(run: Run) -> Path:
    from .gradients import LayerSelector, precompute_store

    vocab, train, val, test, _ = run.data()
    out = run.out("grads")
    ckpts = run.ckpts()
    examples = list(train) + _test_points(run, test)
    sel = LayerSelector.of("embedding", "fc", include_bias=run.cfg.include_bias)
    t0 = time.perf_counter()
    precompute_store(ckpts, examples, None, sel, out / "exact", run.cfg.store_dtype)
    precompute_store(ckpts, examples, run.cfg.topk, sel, out / "topk", run.cfg.store_dtype)
    dump_json({"n_examples": len(examples), "n_checkpoints": len(ckpts.selected)}, out / "summary.json")
    log.info("gradient stores written in %.1fs", time.perf_counter() - t0)
    return out


def cmd_influence(run: Run) -> Path:
    from .influence import InfluenceResult, tracin_we, write_jsonl

    vocab, train, val, test, _ = run.data()
    out = run.out("influence")
    ctx = _context(run, vocab, train)
    n = run.cfg.report_top
    for method in run.cfg.methods:
        results = []
        for x in _test_points(run, test):
            r = ctx.rank(method, x)
            chosen = r.proponents[:n] + r.opponents[:n]
            for tid in chosen:
                res = InfluenceResult(tid, x.id, r.score_of(tid), method)
                if method in ("tracin_we", "tracin_we_topk"):
                    st = ctx.ensure([x], None if method == "tracin_we" else ctx.k)
                    res.word_contribs = tracin_we(st, tid, x.id).word_contribs
                results.append(res)
        write_jsonl(results, out / f"{method.replace(':', '_')}.jsonl")
    return out


def select_test_points(runner, pool, band, repeats, base_seed, limit):
    """Pool examples whose baseline groundtruth probability (mean over retrain seeds) lies in ``band``."""
    from .evaluation import RetrainJob

    res = runner.run([RetrainJob((), base_seed + r) for r in range(repeats)])
    probs = np.mean([r.probs[np.arange(len(pool)), [e.label for e in pool]] for r in res], axis=0)
    chosen = [e for e, p in zip(pool, probs) if band[0] <= p <= band[1]]
    return chosen[:limit], {e.id: float(p) for e, p in zip(pool, probs)}


def cmd_del_eval(run: Run) -> Path:
    from .evaluation import compare_auc, deletion_eval, no_overlap_candidates, plot_curves, restrict, write_curves_csv

    c = run.cfg
    vocab, train, val, test, _ = run.data()
    out = run.out("del_eval")
    ctx = _context(run, vocab, train)
    pool = [test.by_id(i) for i in c.test_ids] if c.test_ids else list(test)
    runner = _retrain_runner(run, train, pool)
    if c.test_ids:
        tests = pool
    else:
        tests, _ = select_test_points(runner, pool, c.test_band, c.repeats, c.retrain_seed, c.n_test)
    curves = {m: [] for m in c.methods}
    for x in tests:
        per_test = []
        for m in c.methods:
            ranking = ctx.rank(m, x)
            if c.restricted_candidates:
                cand = no_overlap_candidates(x, train, c.restricted_candidates, ctx.tfidf())
                ranking = restrict(ranking, cand.ids)
            cv = deletion_eval(x, ranking, runner, c.k_grid, c.repeats, c.retrain_seed)
            curves[m].append(cv)
            per_test.append(cv)
            write_curves_csv(cv, out / f"curve_{x.id}_{m.replace(':', '_')}.csv")
        plot_curves(per_test, out / f"curve_{x.id}.png")
    summary = {
        "test_ids": [x.id for x in tests],
        "methods": {
            m: {"auc_plus": float(np.mean([cv.auc_plus for cv in cs])) if cs else None, "auc_minus": float(np.mean([cv.auc_minus for cv in cs])) if cs else None}
            for m, cs in curves.items()
        },
        "curves": {m: [cv.to_json() for cv in cs] for m, cs in curves.items()},
        "retrains": runner.n_trained,
    }
    if len(c.methods) >= 2 and tests:
        a, b = c.methods[0], c.methods[1]
        summary["comparison"] = {w: dataclasses.asdict(compare_auc(curves[a], curves[b], w)) for w in ("plus", "minus")}
    dump_json(summary, out / "summary.json")
    return out


def cmd_diagnose(run: Run) -> Path:
    from .diagnostics import cancellation_ratio, format_table, layer_grad_cosine, write_report

    c = run.cfg
    vocab, train, val, test, _ = run.data()
    out = run.out("diagnose")
    ckpts = run.ckpts()
    groups = ["bias", "weight"] + ckpts.config.layer_names
    reports = [cancellation_ratio(ckpts, train, g) for g in groups]
    cos = layer_grad_cosine(ckpts.final_model(), train, c.cosine_pairs, c.seed)
    write_report(out / "diagnostics.json", reports, cos)
    (out / "table.txt").write_text(format_table(reports, cos), "utf-8")
    return out


def cmd_cluster(run: Run) -> Path:
    from .clustering import cluster_hard_examples, cluster_rates, hard_ids, misclassification_rates

    c = run.cfg
    vocab, train, val, test, meta = run.data()
    out = run.out("cluster")
    ckpts = run.ckpts()
    hyper = replace(c.train_config(), patience=c.patience)
    rates, pred = misclassification_rates(train, ckpts.config, hyper, val, c.hard_runs, c.retrain_seed)
    hard = hard_ids(rates, c.hard_threshold)
    predicted = {i: int(pred[n].argmax()) for n, i in enumerate(train.ids)}
    ctx = _context(run, vocab, train, ckpts)
    report, dist = cluster_hard_examples(ctx, hard, c.cluster_threshold, c.min_cluster_size, predicted)
    report.write(out / "clusters.md", train, vocab)
    summary = {"hard_ids": hard, "rates": {str(k): v for k, v in sorted(rates.items())}, "clusters": report.clusters, "common_words": [[vocab.tokens[w] for w in ws[:5]] for ws in report.common_words]}
    if meta.get("flipped"):
        f, cl = cluster_rates(report, set(meta["flipped"]), train.ids)
        summary["flipped_cluster_rate"], summary["clean_cluster_rate"] = f, cl
    dump_json(summary, out / "summary.json")
    return out


def cmd_fix(run: Run) -> Path:
    from .evaluation import bootstrap_stderr, fix_eval

    c = run.cfg
    vocab, train, val, test, _ = run.data()
    out = run.out("fix")
    ckpts = run.ckpts()
    ctx = _context(run, vocab, train, ckpts)
    pool = list(val) + list(test)
    probs = predict_proba(ckpts.final_model(), pool)
    cand = [e for e, p in zip(pool, probs) if p.argmax() != e.label and c.fix_band[0] <= p[e.label] <= c.fix_band[1]][: c.n_fix]
    runner = _retrain_runner(run, train, cand, train)
    reports = []
    for strategy in c.fix_strategies:
        for m in c.fix_methods:
            for x in cand:
                reports.append(fix_eval(x, ctx.rank(m, x), runner, strategy, c.fix_k, c.repeats, c.retrain_seed, ctx))
    table = {}
    for strategy in c.fix_strategies:
        for m in c.fix_methods:
            rs = [r for r in reports if r.strategy == strategy and r.method == m]
            if rs:
                arr = np.array([r.fix_prob for r in rs])
                table[f"{strategy}/{m}"] = {"k": list(c.fix_k), "fix_prob": arr.mean(0).tolist(), "stderr": [bootstrap_stderr(arr[:, j]) for j in range(arr.shape[1])]}
    dump_json({"test_ids": [x.id for x in cand], "summary": table, "reports": [r.to_json() for r in reports]}, out / "summary.json")
    return out


def cmd_bench(run: Run) -> Path:
    vocab, train, val, test, _ = run.data()
    from .experiments import bench_timings

    c = run.cfg
    out = run.out("bench")
    ckpts = run.ckpts()
    hyper = replace(c.train_config(), epochs=min(c.epochs, 3))
    tests = list(test)[: max(1, c.n_test)]
    t = bench_timings(train, tests, ckpts.config, hyper, c.bench_width, c.topk, c.bench_pairs, c.seed, c.damping, c.selection_epochs)
    dump_json(t, out / "timings.json")
    lines = [f"{'stage':<44} {'seconds':>12}"] + [f"{k:<44} {v:>12.3g}" for k, v in t.items()]
    (out / "table.txt").write_text("\n".join(lines) + "\n", "utf-8")
    print("\n".join(lines))
    return out


COMMANDS = {
    "train": cmd_train,
    "grads": cmd_grads,
    "influence": cmd_influence,
    "del-eval": cmd_del_eval,
    "diagnose": cmd_diagnose,
    "cluster": cmd_cluster,
    "fix": cmd_fix,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracinwe", description="Word-embedding influence experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML file of run settings")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    if os.environ.get(WORKDIR_ENV) and "workdir" not in overrides:
        overrides["workdir"] = os.environ[WORKDIR_ENV]
    try:
        file_values = _load_toml(args.config) if args.config else {}
        cfg = make_config(file_values, overrides)
    except (ConfigError, OSError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    run = Run(cfg, Path(cfg.workdir))
    cmd_dir = run.root / ("del_eval" if args.command == "del-eval" else args.command)
    try:
        out = COMMANDS[args.command](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any failure is reported and marked
        cmd_dir.mkdir(parents=True, exist_ok=True)
        (cmd_dir / "FAILED").write_text(traceback.format_exc(), "utf-8")
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
