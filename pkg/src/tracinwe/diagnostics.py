"""Cancellation ratio and per-layer gradient cosine diagnostics.

The cancellation ratio of a parameter group compares how far per-example
gradients would move it (``G``) with how far it actually moved (``Delta``):
``C = sum_c G_c / sum_c Delta_c``. A large ratio means per-example gradients
mostly cancel each other.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, Example
from .gradients import batch_grads, word_grads_from_positions
from .textmodel import CheckpointSet, Model, ModelConfig


def param_group(config: ModelConfig, tag: str) -> list[str]:
    """Parameter names for a group tag: ``bias``, ``weight`` (non-embedding), ``embedding``, or a layer name."""
    shapes = config.param_shapes()
    if tag == "bias":
        return [n for n in shapes if n.endswith(".bias")]
    if tag == "weight":
        return [n for n in shapes if n.endswith(".weight") and not n.startswith("embedding")]
    if tag in config.layer_names:
        return [n for n in shapes if n.split(".")[0] == tag]
    raise ValueError(f"unknown parameter group {tag!r}")


def _flat(params: dict[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in names])


def weight_delta(ckpts: CheckpointSet, group: str) -> list[float]:
    names = param_group(ckpts.config, group)
    cs = ckpts.checkpoints
    return [float(np.linalg.norm(_flat(b.theta, names) - _flat(a.theta, names))) for a, b in zip(cs, cs[1:])]


def per_example_group_norms(model: Model, examples: Sequence[Example], names: Sequence[str], chunk: int = 64) -> np.ndarray:
    """L2 norm of each example's loss gradient restricted to ``names``."""
    out = []
    for i in range(0, len(examples), chunk):
        part = examples[i : i + chunk]
        bg = batch_grads(model, part, per_example_params=True)
        sq = np.zeros(len(part))
        for n in names:
            if n == "embedding.weight":
                for r, ex in enumerate(part):
                    m = ex.length
                    sq[r] += word_grads_from_positions(bg.ids[r, :m], bg.input_grads[r, :m]).norm() ** 2
            else:
                g = bg.param[n]
                sq += np.einsum("bi,bi->b", g.reshape(len(part), -1), g.reshape(len(part), -1))
        out.append(np.sqrt(sq))
    return np.concatenate(out) if out else np.zeros(0)


def grad_norm_sum(ckpts: CheckpointSet, dataset: Dataset | Sequence[Example], group: str) -> list[float]:
    """``G_c = eta_c * sum_i ||grad_W l_i||`` for every checkpoint that has a successor."""
    names = param_group(ckpts.config, group)
    exs = list(dataset)
    return [c.eta * float(per_example_group_norms(c.model(ckpts.config), exs, names).sum()) for c in ckpts.checkpoints[:-1]]


@dataclass
class CancellationReport:
    group: str
    delta_per_ckpt: list[float]
    g_per_ckpt: list[float]
    ratio: float | None  # None when the group never moved

    @property
    def defined(self) -> bool:
        return self.ratio is not None

    def to_json(self) -> dict:
        d = asdict(self)
        d["ratio"] = "undefined" if self.ratio is None else self.ratio
        return d


def cancellation_ratio(ckpts: CheckpointSet, dataset: Dataset | Sequence[Example], group: str) -> CancellationReport:
    delta = weight_delta(ckpts, group)
    g = grad_norm_sum(ckpts, dataset, group)
    total = math.fsum(delta)
    ratio = None if total == 0 else math.fsum(g) / total
    return CancellationReport(group, delta, g, ratio)


# ---------------------------------------------------------------- layer cosines


@dataclass
class LayerCosineReport:
    layers: list[str]
    pairs: list[tuple[int, int]]
    cosines: np.ndarray  # n_pairs x n_layers
    means: list[float] = field(default_factory=list)
    ci_low: list[float] = field(default_factory=list)
    ci_high: list[float] = field(default_factory=list)

    def mean(self, layer: str) -> float:
        return self.means[self.layers.index(layer)]

    def difference_ci(self, low_layer: str, high_layer: str, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
        """Paired bootstrap interval for mean(high_layer) - mean(low_layer)."""
        d = self.cosines[:, self.layers.index(high_layer)] - self.cosines[:, self.layers.index(low_layer)]
        return bootstrap_ci(d, n_boot, seed, level)

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "n_pairs": len(self.pairs),
            "mean": dict(zip(self.layers, self.means)),
            "ci95_low": dict(zip(self.layers, self.ci_low)),
            "ci95_high": dict(zip(self.layers, self.ci_high)),
        }


def bootstrap_ci(values: np.ndarray, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


def _layer_vectors(model: Model, examples: Sequence[Example]) -> dict[str, list]:
    """Per-example weight gradients per layer; the embedding layer stays sparse."""
    bg = batch_grads(model, examples, per_example_params=True)
    out: dict[str, list] = {"embedding": []}
    for r, ex in enumerate(examples):
        m = ex.length
        out["embedding"].append(word_grads_from_positions(bg.ids[r, :m], bg.input_grads[r, :m]))
    for layer in model.config.layer_names[1:]:
        g = bg.param[f"{layer}.weight"]
        out[layer] = list(g.reshape(len(examples), -1))
    return out


def _cos(a, b) -> float:
    if hasattr(a, "entries"):
        num, den = a.dot(b), a.norm() * b.norm()
    else:
        num, den = float(a @ b), float(np.linalg.norm(a) * np.linalg.norm(b))
    return num / den if den > 0 else 0.0


def sample_pairs(n: int, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    if n < 2:
        raise ValueError("need at least two examples to sample pairs")
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        a, b = (int(v) for v in rng.integers(0, n, size=2))
        if a != b:
            pairs.append((a, b))
    return pairs


def layer_grad_cosine(
    model: Model,
    dataset: Dataset | Sequence[Example],
    n_pairs: int = 200,
    seed: int = 0,
    pairs: Sequence[tuple[int, int]] | None = None,
    n_boot: int = 2000,
) -> LayerCosineReport:
    """Mean cosine between two examples' weight gradients, per layer (biases excluded)."""
    exs = list(dataset)
    pairs = list(pairs) if pairs is not None else sample_pairs(len(exs), n_pairs, seed)
    used = sorted({i for p in pairs for i in p})
    vecs = _layer_vectors(model, [exs[i] for i in used])
    pos = {i: r for r, i in enumerate(used)}
    layers = model.config.layer_names
    cos = np.array([[_cos(vecs[l][pos[a]], vecs[l][pos[b]]) for l in layers] for a, b in pairs]).reshape(len(pairs), len(layers))
    rep = LayerCosineReport(layers, pairs, cos)
    rep.means = [float(v) for v in cos.mean(axis=0)]
    for j in range(len(layers)):
        lo, hi = bootstrap_ci(cos[:, j], n_boot, seed)
        rep.ci_low.append(lo)
        rep.ci_high.append(hi)
    return rep


# ---------------------------------------------------------------- output


def format_table(reports: Sequence[CancellationReport], cosine: LayerCosineReport | None = None) -> str:
    lines = [f"{'group':<12} {'sum G':>14} {'sum Delta':>12} {'C(W)':>12}"]
    for r in reports:
        c = "undefined" if r.ratio is None else f"{r.ratio:.1f}"
        lines.append(f"{r.group:<12} {math.fsum(r.g_per_ckpt):>14.4f} {math.fsum(r.delta_per_ckpt):>12.4f} {c:>12}")
    if cosine is not None:
        lines.append("")
        lines.append(f"{'layer':<12} {'mean cos':>10} {'95% CI':>22}")
        for l, m, lo, hi in zip(cosine.layers, cosine.means, cosine.ci_low, cosine.ci_high):
            lines.append(f"{l:<12} {m:>10.4f} {f'[{lo:.4f}, {hi:.4f}]':>22}")
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, reports: Sequence[CancellationReport], cosine: LayerCosineReport | None = None) -> None:
    obj = {"cancellation": [r.to_json() for r in reports]}
    if cosine is not None:
        obj["layer_cosine"] = cosine.to_json()
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True), "utf-8")
