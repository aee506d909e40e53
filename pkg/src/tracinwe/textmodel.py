"""Small convolutional text classifier with hand-written backprop.

Layout: token embedding -> [conv(k, f) -> ReLU] * n -> global max pool over
non-pad positions -> fully connected -> softmax cross-entropy.

Convolutions use "same" zero padding. Pad positions are zeroed after every
layer, so a padded sequence computes exactly what its unpadded prefix
computes; the [PAD] row therefore never receives gradient.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import ConfigError, Dataset, Example

log = logging.getLogger(__name__)

DEFAULT_CONV_SPECS = ((5, 10), (5, 10), (1, 10))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = 128
    conv_specs: tuple[tuple[int, int], ...] = DEFAULT_CONV_SPECS
    l2_lambda: float = 0.0
    freeze_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_specs", tuple(tuple(int(v) for v in s) for s in self.conv_specs))
        problems = []
        if self.vocab_size < 5:
            problems.append("vocab_size must be >= 5")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.embed_dim < 1:
            problems.append("embed_dim must be >= 1")
        if not self.conv_specs:
            problems.append("need at least one conv layer")
        for k, f in self.conv_specs:
            if k < 1 or k % 2 == 0:
                problems.append(f"kernel size {k} must be odd and positive")
            if f < 1:
                problems.append(f"filters {f} must be >= 1")
        if self.l2_lambda < 0:
            problems.append("l2_lambda must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def layer_names(self) -> list[str]:
        return ["embedding", *(f"conv{i + 1}" for i in range(len(self.conv_specs))), "fc"]

    @property
    def activation_dim(self) -> int:
        return self.conv_specs[-1][1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"embedding.weight": (self.vocab_size, self.embed_dim)}
        d_in = self.embed_dim
        for i, (k, f) in enumerate(self.conv_specs, 1):
            shapes[f"conv{i}.weight"] = (k, d_in, f)
            shapes[f"conv{i}.bias"] = (f,)
            d_in = f
        shapes["fc.weight"] = (d_in, self.num_classes)
        shapes["fc.bias"] = (self.num_classes,)
        return shapes

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def count_params(config: ModelConfig, include_embedding: bool = False) -> dict[str, int]:
    """Parameter counts split into weights and biases."""
    w = b = 0
    for name, shape in config.param_shapes().items():
        if name.startswith("embedding") and not include_embedding:
            continue
        if name.endswith(".bias"):
            b += math.prod(shape)
        else:
            w += math.prod(shape)
    return {"weights": w, "biases": b, "total": w + b}


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.startswith("embedding"):
        # one active row per lookup
        return 1, shape[1]
    if len(shape) == 3:
        k, d_in, d_out = shape
        return k * d_in, k * d_out
    return shape[0], shape[1]


def init_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            a = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return Model(config, params)


# ---------------------------------------------------------------- batching


def batch_arrays(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Token ids trimmed to the longest sequence in the batch, plus a 0/1 mask."""
    lengths = [e.length for e in examples]
    t = max(lengths)
    ids = np.zeros((len(examples), t), dtype=np.int64)
    for i, e in enumerate(examples):
        ids[i, : lengths[i]] = e.token_ids[: lengths[i]]
    return ids, (ids != 0).astype(np.float64)


def _tap_sum(y: np.ndarray) -> np.ndarray:
    """z[:, t] = sum_j y[:, t + j - p, j] with zeros outside the sequence."""
    b, t, k, f = y.shape
    p = k // 2
    z = y[:, :, p].copy()
    for j in range(k):
        o = j - p
        if o > 0:
            z[:, : t - o] += y[:, o:, j]
        elif o < 0:
            z[:, -o:] += y[:, : t + o, j]
    return z


def _tap_spread(dz: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`_tap_sum`."""
    b, t, f = dz.shape
    p = k // 2
    dy = np.zeros((b, t, k, f))
    for j in range(k):
        o = j - p
        if o >= 0:
            dy[:, o:, j] = dz[:, : t - o]
        else:
            dy[:, : t + o, j] = dz[:, -o:]
    return dy


def _tap_weights(w: np.ndarray) -> np.ndarray:
    # (k, d_in, f) -> (d_in, k*f)
    k, d_in, f = w.shape
    return w.transpose(1, 0, 2).reshape(d_in, k * f)


@dataclass
class ForwardCache:
    ids: np.ndarray
    mask: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    pool_idx: np.ndarray | None = None
    activation: np.ndarray | None = None
    logits: np.ndarray | None = None


def forward_batch(params: dict[str, np.ndarray], config: ModelConfig, ids: np.ndarray, mask: np.ndarray) -> ForwardCache:
    # each conv is computed as per-tap projections (h @ W_j) shifted and summed,
    # which equals "same"-padded convolution without materialising im2col windows
    cache = ForwardCache(ids, mask)
    m3 = mask[:, :, None]
    h = params["embedding.weight"][ids] * m3
    b, t = ids.shape
    for i, (k, f) in enumerate(config.conv_specs, 1):
        y = (h @ _tap_weights(params[f"conv{i}.weight"])).reshape(b, t, k, f)
        z = _tap_sum(y) + params[f"conv{i}.bias"]
        cache.inputs.append(h)
        cache.pre.append(z)
        h = np.maximum(z, 0.0) * m3
    masked = np.where(m3 > 0, h, -np.inf)
    idx = np.argmax(masked, axis=1)  # first position wins ties
    cache.pool_idx = idx
    cache.activation = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
    cache.logits = cache.activation @ params["fc.weight"] + params["fc.bias"]
    return cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - np.take_along_axis(z, np.asarray(labels)[:, None], axis=-1)[:, 0]


@dataclass
class BackwardResult:
    grads: dict[str, np.ndarray]
    input_grads: np.ndarray | None  # B x T x d, gradient w.r.t. the (masked) embedded input


def scatter_rows(ids: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Dense (n_rows x d) matrix with ``rows`` summed into ``ids``, in position order."""
    flat = ids.ravel()
    rows = rows.reshape(len(flat), -1)
    order = np.argsort(flat, kind="stable")
    s = flat[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    out = np.zeros((n_rows, rows.shape[1]))
    out[s[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def backward_batch(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    cache: ForwardCache,
    dlogits: np.ndarray,
    per_example: bool = False,
    embedding: bool = True,
    want_inputs: bool = False,
) -> BackwardResult:
    """Backprop ``dlogits`` (B x C).

    With ``per_example`` every non-embedding gradient keeps a leading batch
    axis. The dense embedding gradient is only formed for summed gradients
    when ``embedding`` is set; per-example embedding gradients are carried by
    ``input_grads``.
    """
    grads: dict[str, np.ndarray] = {}
    a = cache.activation
    if per_example:
        grads["fc.weight"] = a[:, :, None] * dlogits[:, None, :]
        grads["fc.bias"] = dlogits.copy()
    else:
        grads["fc.weight"] = a.T @ dlogits
        grads["fc.bias"] = dlogits.sum(axis=0)
    da = dlogits @ params["fc.weight"].T
    b, t = cache.ids.shape
    dh = np.zeros((b, t, da.shape[1]))
    np.put_along_axis(dh, cache.pool_idx[:, None, :], da[:, None, :], axis=1)
    m3 = cache.mask[:, :, None]
    need_input = embedding or per_example or want_inputs
    for i in range(len(config.conv_specs), 0, -1):
        k, f = config.conv_specs[i - 1]
        w = params[f"conv{i}.weight"]
        d_in = w.shape[1]
        dz = dh * (cache.pre[i - 1] > 0) * m3
        dy = _tap_spread(dz, k).reshape(b, t, k * f)
        h_in = cache.inputs[i - 1]
        if per_example:
            gw = h_in.transpose(0, 2, 1) @ dy  # b, d_in, k*f
            grads[f"conv{i}.weight"] = gw.reshape(b, d_in, k, f).transpose(0, 2, 1, 3)
            grads[f"conv{i}.bias"] = dz.sum(axis=1)
        else:
            gw = h_in.reshape(b * t, d_in).T @ dy.reshape(b * t, k * f)
            grads[f"conv{i}.weight"] = gw.reshape(d_in, k, f).transpose(1, 0, 2)
            grads[f"conv{i}.bias"] = dz.sum(axis=(0, 1))
        if i == 1 and not need_input:
            dh = None
            break
        dh = dy @ _tap_weights(w).T
    input_grads = None if dh is None else dh * m3
    if embedding and not per_example:
        grads["embedding.weight"] = scatter_rows(cache.ids, input_grads, config.vocab_size)
    return BackwardResult(grads, input_grads)


def add_l2(grads: dict[str, np.ndarray], params: dict[str, np.ndarray], lam: float, per_example: bool = False) -> None:
    """Add ``lam * theta`` to every non-embedding gradient (the embedding table is not regularized)."""
    if lam == 0:
        return
    for name, g in grads.items():
        if name.startswith("embedding"):
            continue
        grads[name] = g + lam * (params[name][None] if per_example else params[name])


def l2_penalty(params: dict[str, np.ndarray], lam: float) -> float:
    if lam == 0:
        return 0.0
    return 0.5 * lam * sum(float(np.sum(v * v)) for k, v in params.items() if not k.startswith("embedding"))


# ---------------------------------------------------------------- public API


def _chunks(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def forward(model: Model, example: Example) -> np.ndarray:
    if len(example.token_ids) == 0:
        raise ValueError(f"example {example.id} is not encoded")
    ids, mask = batch_arrays([example])
    if ids.max() >= model.config.vocab_size:
        raise ValueError(f"example {example.id} has token ids outside the model vocabulary")
    return forward_batch(model.params, model.config, ids, mask).logits[0]


def logits_batch(model: Model, examples: Sequence[Example], chunk: int = 256) -> np.ndarray:
    out = []
    for part in _chunks(list(examples), chunk):
        ids, mask = batch_arrays(part)
        out.append(forward_batch(model.params, model.config, ids, mask).logits)
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out)


def loss(model: Model, example: Example) -> float:
    logits = forward(model, example)
    ce = float(cross_entropy(logits[None], np.array([example.label]))[0])
    return ce + l2_penalty(model.params, model.config.l2_lambda)


def predict_proba(model: Model, examples: Sequence[Example]) -> np.ndarray:
    return softmax(logits_batch(model, examples))


def predict_prob(model: Model, example: Example, class_id: int) -> float:
    if not 0 <= class_id < model.config.num_classes:
        raise ValueError(f"class_id {class_id} out of range 0..{model.config.num_classes - 1}")
    return float(softmax(forward(model, example))[class_id])


def accuracy(model: Model, examples: Sequence[Example]) -> float:
    if not examples:
        return float("nan")
    pred = predict_proba(model, examples).argmax(axis=1)
    return float(np.mean(pred == np.array([e.label for e in examples])))


def example_grads(model: Model, example: Example) -> dict[str, np.ndarray]:
    """Full gradient of the single-example loss (including the l2 term)."""
    ids, mask = batch_arrays([example])
    cache = forward_batch(model.params, model.config, ids, mask)
    p = softmax(cache.logits)
    p[0, example.label] -= 1.0
    res = backward_batch(model.params, model.config, cache, p)
    add_l2(res.grads, model.params, model.config.l2_lambda)
    return res.grads


# ---------------------------------------------------------------- training


class MomentumSGD:
    """Heavy-ball SGD: v <- mu*v + g; theta <- theta - lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    checkpoint_every: int = 1  # epochs
    seed: int = 0
    patience: int | None = None  # early stopping on validation loss when a val set is given

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must be in [0, 1)")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class Checkpoint:
    step: int
    epoch: int
    eta: float
    theta: dict[str, np.ndarray]

    def model(self, config: ModelConfig) -> Model:
        return Model(config, self.theta)


@dataclass
class CheckpointSet:
    config: ModelConfig
    checkpoints: list[Checkpoint]
    selection: list[int]
    best_index: int | None = None

    def __post_init__(self):
        steps = [c.step for c in self.checkpoints]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint steps must be strictly increasing")
        if not self.selection or any(not 0 <= i < len(self.checkpoints) for i in self.selection):
            raise ValueError(f"bad checkpoint selection {self.selection}")

    @property
    def selected(self) -> list[Checkpoint]:
        return [self.checkpoints[i] for i in self.selection]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def final_model(self) -> Model:
        return self.final.model(self.config)

    def best_model(self) -> Model:
        i = len(self.checkpoints) - 1 if self.best_index is None else self.best_index
        return self.checkpoints[i].model(self.config)

    def with_selection(self, selection: Sequence[int]) -> "CheckpointSet":
        return replace(self, selection=list(selection))

    def by_epochs(self, epochs: Iterable[int]) -> list[int]:
        want = set(epochs)
        return [i for i, c in enumerate(self.checkpoints) if c.epoch in want]


def default_selection(checkpoints: Sequence[Checkpoint], epochs: Iterable[int] = (1, 2, 3)) -> list[int]:
    sel = [i for i, c in enumerate(checkpoints) if c.epoch in set(epochs)]
    return sel or [len(checkpoints) - 1]


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def epoch_order(ids: Sequence[int], seed: int, epoch: int) -> np.ndarray:
    """Positions of ``ids`` in training order for ``epoch``.

    Each id gets a hash key from (seed, epoch, id), so removing examples leaves
    the relative order of the survivors unchanged.
    """
    base = _splitmix64(np.array([seed & 0xFFFFFFFF], dtype=np.uint64) ^ np.uint64(epoch << 32))[0]
    keys = _splitmix64(np.asarray(ids, dtype=np.uint64) ^ base)
    return np.argsort(keys, kind="stable")


def epoch_batches(ids: Sequence[int], seed: int, epoch: int, batch_size: int, universe: Sequence[int] | None = None) -> list[np.ndarray]:
    """Minibatches (positions into ``ids``) for one epoch.

    With ``universe`` (a superset of ``ids``) batches are cut from the
    universe's order and absent examples leave holes, so every surviving
    example keeps its batch and its batch-mates; a batch may end up empty.
    """
    if universe is None:
        order = epoch_order(ids, seed, epoch)
        return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    universe = np.asarray(universe)
    pos = {int(e): i for i, e in enumerate(ids)}
    if len(pos) != len(ids) or not set(pos) <= set(universe.tolist()):
        raise ValueError("universe must contain every training id")
    u_order = universe[epoch_order(universe, seed, epoch)]
    out = []
    for i in range(0, len(u_order), batch_size):
        out.append(np.array([pos[int(e)] for e in u_order[i : i + batch_size] if int(e) in pos], dtype=np.int64))
    return out


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _mean_loss(model: Model, examples: Sequence[Example]) -> float:
    logits = logits_batch(model, examples)
    return float(np.mean(cross_entropy(logits, np.array([e.label for e in examples]))))


def train(
    model: Model,
    train_set: Dataset | Sequence[Example],
    hyper: TrainConfig,
    val_set: Dataset | Sequence[Example] | None = None,
    selection_epochs: Iterable[int] = (1, 2, 3),
    universe: Sequence[int] | None = None,
) -> CheckpointSet:
    """Minibatch momentum SGD on cross-entropy (+ l2). Mutates ``model``.

    Each batch's summed loss is divided by the nominal batch size, so a
    missing example removes exactly its own gradient term; with ``universe``
    (see ``epoch_batches``) a retrain on a subset follows the same batch
    layout as training on the full universe.

    Checkpoints: the initial parameters (epoch 0), then every
    ``checkpoint_every`` epochs, then the final state. With ``val_set`` and
    ``hyper.patience`` training stops after ``patience`` epochs without a
    validation-loss improvement and ``best_index`` marks the best checkpoint.
    """
    examples = list(train_set)
    if not examples:
        raise ValueError("training set is empty")
    config = model.config
    opt = MomentumSGD(hyper.lr, hyper.momentum)
    ids = [e.id for e in examples]
    labels = np.array([e.label for e in examples])
    all_len = np.array([e.length for e in examples])
    all_ids = np.zeros((len(examples), int(all_len.max())), dtype=np.int64)
    for i, e in enumerate(examples):
        all_ids[i, : all_len[i]] = e.token_ids[: all_len[i]]
    ckpts = [Checkpoint(0, 0, hyper.lr, _snapshot(model.params))]
    step = 0
    best_loss, best_index, since_best = math.inf, None, 0
    early_stop = val_set is not None and hyper.patience is not None
    for epoch in range(1, hyper.epochs + 1):
        for sel in epoch_batches(ids, hyper.seed, epoch, hyper.batch_size, universe):
            if len(sel) == 0:
                # every member was removed: momentum still carries the step
                opt.step(model.params, {k: np.zeros_like(v) for k, v in model.params.items()})
                step += 1
                continue
            t = int(all_len[sel].max())
            b_ids = all_ids[sel, :t]
            mask = (b_ids != 0).astype(np.float64)
            cache = forward_batch(model.params, config, b_ids, mask)
            p = softmax(cache.logits)
            y = labels[sel]
            batch_loss = float(np.mean(cross_entropy(cache.logits, y)))
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"loss became {batch_loss} at epoch {epoch} step {step + 1} (lr={hyper.lr}); "
                    "lower the learning rate"
                )
            p[np.arange(len(sel)), y] -= 1.0
            res = backward_batch(model.params, config, cache, p / hyper.batch_size, embedding=not config.freeze_embeddings)
            add_l2(res.grads, model.params, config.l2_lambda)
            if config.freeze_embeddings:
                res.grads.pop("embedding.weight", None)
            opt.step(model.params, res.grads)
            step += 1
        save = epoch % hyper.checkpoint_every == 0 or epoch == hyper.epochs
        stop = is_best = False
        if early_stop:
            vl = _mean_loss(model, list(val_set))
            if vl < best_loss - 1e-12:
                best_loss, since_best, save, is_best = vl, 0, True, True
            else:
                since_best += 1
                stop = since_best >= hyper.patience
        if save or stop:
            ckpts.append(Checkpoint(step, epoch, hyper.lr, _snapshot(model.params)))
            if is_best:
                best_index = len(ckpts) - 1
        if stop:
            break
    if ckpts[-1].step != step:
        ckpts.append(Checkpoint(step, epoch, hyper.lr, _snapshot(model.params)))
    return CheckpointSet(config, ckpts, default_selection(ckpts, selection_epochs), best_index)


def fit(
    config: ModelConfig,
    train_set: Dataset | Sequence[Example],
    hyper: TrainConfig,
    val_set=None,
    selection_epochs: Iterable[int] = (1, 2, 3),
    universe: Sequence[int] | None = None,
) -> CheckpointSet:
    """Initialise from ``config.seed`` and train."""
    return train(init_model(config), train_set, hyper, val_set, selection_epochs, universe)


# ---------------------------------------------------------------- persistence


def save_checkpoints(ckpts: CheckpointSet, directory: str | Path) -> None:
    """One little-endian float64 blob per checkpoint plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(ckpts.config.param_shapes())
    entries = []
    for i, c in enumerate(ckpts.checkpoints):
        fname = f"ckpt_{i:04d}.bin"
        blob = b"".join(np.ascontiguousarray(c.theta[n], dtype="<f8").tobytes() for n in names)
        (directory / fname).write_bytes(blob)
        entries.append(
            {"file": fname, "step": c.step, "epoch": c.epoch, "eta": c.eta, "sha256": hashlib.sha256(blob).hexdigest()}
        )
    manifest = {
        "config": ckpts.config.to_json(),
        "config_hash": ckpts.config.digest(),
        "tensors": [{"name": n, "shape": list(ckpts.config.param_shapes()[n])} for n in names],
        "checkpoints": entries,
        "selection": list(ckpts.selection),
        "best_index": ckpts.best_index,
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True), "utf-8")
    tmp.replace(directory / "manifest.json")


def load_checkpoints(directory: str | Path) -> CheckpointSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text("utf-8"))
    cfg = dict(manifest["config"])
    cfg["conv_specs"] = tuple(tuple(s) for s in cfg["conv_specs"])
    config = ModelConfig(**cfg)
    if config.digest() != manifest["config_hash"]:
        raise ValueError(f"{directory}: config hash mismatch")
    ckpts = []
    for e in manifest["checkpoints"]:
        blob = (directory / e["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise ValueError(f"{directory / e['file']}: checksum mismatch")
        flat = np.frombuffer(blob, dtype="<f8")
        theta, off = {}, 0
        for t in manifest["tensors"]:
            size = math.prod(t["shape"])
            theta[t["name"]] = flat[off : off + size].reshape(t["shape"]).astype(np.float64)
            off += size
        ckpts.append(Checkpoint(e["step"], e["epoch"], e["eta"], theta))
    return CheckpointSet(config, ckpts, manifest["selection"], manifest.get("best_index"))
