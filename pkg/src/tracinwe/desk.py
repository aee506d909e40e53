"""The shared desk-scale setup: synthetic corpus, splits, vocabulary and trained CNN."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .corpus import Dataset, Vocab, build_vocab, split
from .synth import SynthConfig, SynthCorpus, make_corpus
from .textmodel import CheckpointSet, ModelConfig, TrainConfig, fit


@dataclass(frozen=True)
class DeskConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(n_examples=2500))
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    embed_dim: int = 128
    conv_specs: tuple[tuple[int, int], ...] = ((5, 10), (5, 10), (1, 10))
    freeze_embeddings: bool = False
    hyper: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, batch_size=32, lr=0.05, momentum=0.9))
    selection_epochs: tuple[int, ...] = (1, 2, 3)
    model_seed: int = 0


@dataclass
class Desk:
    cfg: DeskConfig
    corpus: SynthCorpus
    vocab: Vocab
    train: Dataset
    val: Dataset
    test: Dataset
    model_config: ModelConfig
    ckpts: CheckpointSet | None = None


def build_desk(cfg: DeskConfig = DeskConfig(), train_model: bool = True) -> Desk:
    corpus = make_corpus(cfg.synth)
    tr, va, te = split(corpus.dataset, cfg.split_seed, cfg.fractions)
    vocab = build_vocab([e.text for e in tr])
    tr, va, te = tr.encode(vocab), va.encode(vocab), te.encode(vocab)
    mc = ModelConfig(
        len(vocab),
        corpus.dataset.num_classes,
        embed_dim=cfg.embed_dim,
        conv_specs=cfg.conv_specs,
        freeze_embeddings=cfg.freeze_embeddings,
        seed=cfg.model_seed,
    )
    desk = Desk(cfg, corpus, vocab, tr, va, te, mc)
    if train_model:
        desk.ckpts = fit(mc, tr, replace(cfg.hyper, seed=cfg.model_seed), selection_epochs=cfg.selection_epochs)
    return desk
