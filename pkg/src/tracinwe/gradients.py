"""Per-example gradients: parameter groups, sparse word-embedding rows, top-k, saliency.

Flat parameter-gradient order (``param_grads``): layers in model order
(embedding, conv1..convN, fc); within a layer the weight tensor flattened in
C order, followed by its bias when ``include_bias`` is set. The embedding is
flattened densely (vocab x dim) and has no bias.

All gradients here are of the per-example cross-entropy only; the l2 term of
the training objective is shared by every example and is left out of
influence scores.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Dataset, Example
from .textmodel import (
    CheckpointSet,
    Model,
    ModelConfig,
    backward_batch,
    batch_arrays,
    forward_batch,
    softmax,
)


@dataclass(frozen=True)
class LayerSelector:
    layers: frozenset[str]
    include_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(self.layers))
        if not self.layers:
            raise ValueError("layer selector must name at least one layer")

    @classmethod
    def of(cls, *layers: str, include_bias: bool = False) -> "LayerSelector":
        return cls(frozenset(layers), include_bias)

    @classmethod
    def all(cls, config: ModelConfig, include_bias: bool = False) -> "LayerSelector":
        return cls(frozenset(config.layer_names), include_bias)

    def check(self, config: ModelConfig) -> None:
        unknown = self.layers - set(config.layer_names)
        if unknown:
            raise ValueError(f"unknown layers {sorted(unknown)}; model has {config.layer_names}")

    def param_names(self, config: ModelConfig) -> list[str]:
        self.check(config)
        names = []
        for layer in config.layer_names:
            if layer in self.layers:
                names.append(f"{layer}.weight")
                if self.include_bias and layer != "embedding":
                    names.append(f"{layer}.bias")
        return names

    def size(self, config: ModelConfig) -> int:
        shapes = config.param_shapes()
        return sum(int(np.prod(shapes[n])) for n in self.param_names(config))


# ---------------------------------------------------------------- batched primitives


@dataclass
class BatchGrads:
    """Gradients of each example's own loss, for one batch."""

    ids: np.ndarray  # B x T
    mask: np.ndarray
    saliency: np.ndarray  # B x C, softmax - onehot
    activation: np.ndarray  # B x A
    input_grads: np.ndarray | None  # B x T x d
    param: dict[str, np.ndarray] = field(default_factory=dict)  # per-example, leading B axis


def batch_grads(model: Model, examples: Sequence[Example], per_example_params: bool = False) -> BatchGrads:
    ids, mask = batch_arrays(examples)
    cache = forward_batch(model.params, model.config, ids, mask)
    sal = softmax(cache.logits)
    sal[np.arange(len(examples)), [e.label for e in examples]] -= 1.0
    res = backward_batch(
        model.params, model.config, cache, sal, per_example=per_example_params, embedding=False, want_inputs=True
    )
    return BatchGrads(ids, mask, sal, cache.activation, res.input_grads, res.grads if per_example_params else {})


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


# ---------------------------------------------------------------- word gradients


@dataclass
class SparseWordGrad:
    """Rows of the embedding gradient that can be non-zero: one per distinct word."""

    entries: dict[int, np.ndarray]
    checkpoint_step: int = 0

    def dot(self, other: "SparseWordGrad", words: Iterable[int] | None = None) -> float:
        keys = self.entries.keys() & other.entries.keys()
        if words is not None:
            keys &= set(words)
        return float(sum(float(self.entries[w] @ other.entries[w]) for w in sorted(keys)))

    def densify(self, vocab_size: int, dim: int) -> np.ndarray:
        out = np.zeros((vocab_size, dim))
        for w, g in self.entries.items():
            out[w] = g
        return out

    def norm(self) -> float:
        return float(np.sqrt(sum(float(g @ g) for g in self.entries.values())))


def topk_positions(norms: np.ndarray, valid: np.ndarray, k: int | None) -> np.ndarray:
    """Indices of the ``k`` valid positions with the largest norm, ascending.

    Ties go to the earlier position; ``k=None`` or ``k >= #valid`` keeps all.
    """
    pos = np.flatnonzero(valid)
    if k is None or k >= len(pos):
        return pos
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.lexsort((pos, -norms[pos]))
    return np.sort(pos[order[:k]])


def word_grads_from_positions(
    token_ids: np.ndarray, pos_grads: np.ndarray, k: int | None = None, step: int = 0
) -> SparseWordGrad:
    """Sum position gradients into per-word rows, optionally keeping only the top-k positions."""
    token_ids = np.asarray(token_ids)
    valid = token_ids != 0
    norms = np.linalg.norm(pos_grads, axis=-1)
    entries: dict[int, np.ndarray] = {}
    for i in topk_positions(norms, valid, k):
        w = int(token_ids[i])
        if w in entries:
            entries[w] = entries[w] + pos_grads[i]
        else:
            entries[w] = pos_grads[i].copy()
    return SparseWordGrad(entries, step)


def position_grads(model: Model, example: Example) -> tuple[np.ndarray, np.ndarray]:
    """(token ids, n x d gradient w.r.t. each input position's embedding)."""
    bg = batch_grads(model, [example])
    n = example.length
    return bg.ids[0, :n], bg.input_grads[0, :n]


def word_embedding_grads(model: Model, example: Example, step: int = 0) -> SparseWordGrad:
    ids, g = position_grads(model, example)
    return word_grads_from_positions(ids, g, None, step)


def topk_word_grads(model: Model, example: Example, k: int = 10, step: int = 0) -> SparseWordGrad:
    if k < 1:
        raise ValueError("k must be >= 1")
    ids, g = position_grads(model, example)
    return word_grads_from_positions(ids, g, k, step)


def loss_saliency(model: Model, example: Example) -> np.ndarray:
    return batch_grads(model, [example]).saliency[0]


def dense_embedding_grad(model: Model, example: Example) -> np.ndarray:
    """Full V x d embedding gradient via the dense backward path (test oracle)."""
    ids, mask = batch_arrays([example])
    cache = forward_batch(model.params, model.config, ids, mask)
    sal = softmax(cache.logits)
    sal[0, example.label] -= 1.0
    return backward_batch(model.params, model.config, cache, sal, embedding=True).grads["embedding.weight"]


# ---------------------------------------------------------------- parameter gradients


def _flatten(grads: dict[str, np.ndarray], names: list[str], batched: bool) -> np.ndarray:
    if batched:
        b = next(iter(grads.values())).shape[0]
        return np.concatenate([grads[n].reshape(b, -1) for n in names], axis=1)
    return np.concatenate([grads[n].ravel() for n in names])


def param_grads(model: Model, example: Example, selector: LayerSelector) -> np.ndarray:
    """Flat gradient of the example's loss over the selected parameters."""
    names = selector.param_names(model.config)
    bg = batch_grads(model, [example], per_example_params=True)
    grads = {n: g[0] for n, g in bg.param.items()}
    if "embedding.weight" in names:
        ids, g = bg.ids[0], bg.input_grads[0]
        grads["embedding.weight"] = word_grads_from_positions(ids, g).densify(
            model.config.vocab_size, model.config.embed_dim
        )
    return _flatten(grads, names, batched=False)


def per_example_param_grads(
    model: Model, examples: Sequence[Example], selector: LayerSelector, chunk: int = 128
) -> np.ndarray:
    """N x P matrix of flat gradients; the embedding layer is not allowed here."""
    names = selector.param_names(model.config)
    if "embedding.weight" in names:
        raise ValueError("dense per-example embedding gradients are V x d each; use word gradients")
    out = []
    for part in _chunks(list(examples), chunk):
        bg = batch_grads(model, part, per_example_params=True)
        out.append(_flatten(bg.param, names, batched=True))
    return np.concatenate(out) if out else np.zeros((0, selector.size(model.config)))


# ---------------------------------------------------------------- records and the store


@dataclass
class ExampleGradientRecord:
    example_id: int
    checkpoint_step: int
    word_grads: SparseWordGrad
    saliency: np.ndarray
    fc_grad: np.ndarray  # flattened fc weights (then bias when the store includes it)
    activation: np.ndarray

    def encode(self, dtype: str = "<f4") -> bytes:
        parts = [struct.pack("<IIH", self.example_id, self.checkpoint_step, len(self.word_grads.entries))]
        for w in sorted(self.word_grads.entries):
            parts.append(struct.pack("<I", w))
            parts.append(np.asarray(self.word_grads.entries[w], dtype=dtype).tobytes())
        parts.append(struct.pack("<B", len(self.saliency)))
        parts.append(np.asarray(self.saliency, dtype=dtype).tobytes())
        parts.append(struct.pack("<I", len(self.fc_grad)))
        parts.append(np.asarray(self.fc_grad, dtype=dtype).tobytes())
        parts.append(struct.pack("<H", len(self.activation)))
        parts.append(np.asarray(self.activation, dtype=dtype).tobytes())
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes, dim: int, dtype: str = "<f4") -> "ExampleGradientRecord":
        size = np.dtype(dtype).itemsize
        ex_id, step, n_words = struct.unpack_from("<IIH", buf, 0)
        off = 10
        entries = {}
        for _ in range(n_words):
            (w,) = struct.unpack_from("<I", buf, off)
            off += 4
            entries[w] = np.frombuffer(buf, dtype=dtype, count=dim, offset=off).astype(np.float64)
            off += dim * size

        def vec(fmt):
            nonlocal off
            (n,) = struct.unpack_from(fmt, buf, off)
            off += struct.calcsize(fmt)
            v = np.frombuffer(buf, dtype=dtype, count=n, offset=off).astype(np.float64)
            off += n * size
            return v

        sal, fc, act = vec("<B"), vec("<I"), vec("<H")
        if off != len(buf):
            raise ValueError(f"record for example {ex_id}: {len(buf) - off} trailing bytes")
        return cls(ex_id, step, SparseWordGrad(entries, step), sal, fc, act)


def compute_records(
    model: Model, step: int, examples: Sequence[Example], k: int | None = None, include_bias: bool = False, chunk: int = 128
) -> list[ExampleGradientRecord]:
    out = []
    for part in _chunks(list(examples), chunk):
        bg = batch_grads(model, part)
        for i, ex in enumerate(part):
            n = ex.length
            wg = word_grads_from_positions(bg.ids[i, :n], bg.input_grads[i, :n], k, step)
            sal = bg.saliency[i]
            fc = np.outer(bg.activation[i], sal).ravel()
            if include_bias:
                fc = np.concatenate([fc, sal])
            out.append(ExampleGradientRecord(ex.id, step, wg, sal.copy(), fc, bg.activation[i].copy()))
    return out


class StoreError(RuntimeError):
    pass


@dataclass
class GradientStore:
    """Gradient records keyed by (example id, checkpoint step)."""

    k: int | None
    include_bias: bool
    config_hash: str
    embed_dim: int
    steps: list[int]
    etas: list[float]
    records: dict[tuple[int, int], ExampleGradientRecord] = field(default_factory=dict)

    def get(self, example_id: int, step: int) -> ExampleGradientRecord:
        try:
            return self.records[(example_id, step)]
        except KeyError:
            raise KeyError(f"no gradient record for example {example_id} at checkpoint step {step}") from None

    def has(self, example_id: int) -> bool:
        return all((example_id, s) in self.records for s in self.steps)

    def example_ids(self) -> list[int]:
        return sorted({eid for eid, _ in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def add(self, records: Iterable[ExampleGradientRecord]) -> None:
        for r in records:
            self.records[(r.example_id, r.checkpoint_step)] = r

    def save(self, directory: str | Path, dtype: str = "f32") -> None:
        """Length-prefixed records, one directory per checkpoint; manifest written last."""
        np_dtype = {"f32": "<f4", "f64": "<f8"}[dtype]
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest_path = directory / "manifest.json"
        if manifest_path.exists():
            manifest_path.unlink()
        ckpt_entries = []
        for step, eta in zip(self.steps, self.etas):
            sub = directory / f"step_{step:08d}"
            sub.mkdir(exist_ok=True)
            recs = sorted((r for (e, s), r in self.records.items() if s == step), key=lambda r: r.example_id)
            blob = b"".join(struct.pack("<I", len(b)) + b for b in (r.encode(np_dtype) for r in recs))
            (sub / "records.bin").write_bytes(blob)
            ckpt_entries.append(
                {
                    "step": step,
                    "eta": eta,
                    "file": f"{sub.name}/records.bin",
                    "n_records": len(recs),
                    "sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
        manifest = {
            "format": "tracinwe-gradient-store/1",
            "dtype": dtype,
            "k": self.k,
            "include_bias": self.include_bias,
            "config_hash": self.config_hash,
            "embed_dim": self.embed_dim,
            "checkpoints": ckpt_entries,
        }
        tmp = directory / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), "utf-8")
        tmp.replace(manifest_path)

    @classmethod
    def load(cls, directory: str | Path) -> "GradientStore":
        directory = Path(directory)
        mpath = directory / "manifest.json"
        if not mpath.exists():
            raise StoreError(f"{directory}: no manifest; the store is incomplete or was never finalized")
        m = json.loads(mpath.read_text("utf-8"))
        np_dtype = {"f32": "<f4", "f64": "<f8"}[m["dtype"]]
        store = cls(m["k"], m["include_bias"], m["config_hash"], m["embed_dim"], [], [])
        for e in m["checkpoints"]:
            blob = (directory / e["file"]).read_bytes()
            if hashlib.sha256(blob).hexdigest() != e["sha256"]:
                raise StoreError(f"{directory / e['file']}: checksum mismatch; store is invalid")
            store.steps.append(e["step"])
            store.etas.append(e["eta"])
            off = n = 0
            while off < len(blob):
                (size,) = struct.unpack_from("<I", blob, off)
                off += 4
                store.add([ExampleGradientRecord.decode(blob[off : off + size], m["embed_dim"], np_dtype)])
                off += size
                n += 1
            if n != e["n_records"]:
                raise StoreError(f"{directory / e['file']}: expected {e['n_records']} records, found {n}")
        return store


def precompute_store(
    ckpts: CheckpointSet,
    examples: Iterable[Example] | Dataset,
    k: int | None = None,
    selector: LayerSelector | None = None,
    path: str | Path | None = None,
    dtype: str = "f32",
) -> GradientStore:
    """Records for every example at every selected checkpoint.

    ``selector.include_bias`` decides whether fc gradients carry the bias
    entries. With ``path`` the store is also written to disk.
    """
    include_bias = bool(selector and selector.include_bias)
    examples = list(examples)
    sel = ckpts.selected
    store = GradientStore(k, include_bias, ckpts.config.digest(), ckpts.config.embed_dim, [c.step for c in sel], [c.eta for c in sel])
    for c in sel:
        store.add(compute_records(c.model(ckpts.config), c.step, examples, k, include_bias))
    if path is not None:
        store.save(path, dtype)
    return store
