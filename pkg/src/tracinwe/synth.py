"""Synthetic news-style corpus for desk-scale experiments.

Each class owns a pool of topic words drawn with Zipf-like frequencies, so
a handful of rare keywords decide most labels. Sentences mix in topic words
from other classes, neutral filler and stopwords, which keeps the task
learnable but not trivially separable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset, Example, default_stopwords

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "st", "tr", "pl", "gr", "sh"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "n", "r", "s", "l", "t", "x", "m"]


def _make_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syl)) + rng.choice(_CODAS)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _zipf(n: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


@dataclass
class SynthConfig:
    n_examples: int = 2000
    num_classes: int = 4
    topic_words: int = 80  # per class
    neutral_words: int = 300
    zipf_s: float = 1.05
    min_len: int = 6
    max_len: int = 16
    topic_per_sentence: tuple[int, int] = (2, 4)
    distractor_prob: float = 0.5
    stopword_frac: float = 0.35
    flip_rate: float = 0.0
    seed: int = 0


@dataclass
class SynthCorpus:
    dataset: Dataset
    flipped: set[int] = field(default_factory=set)
    true_labels: dict[int, int] = field(default_factory=dict)
    topic_vocab: list[list[str]] = field(default_factory=list)


def make_corpus(cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    taken = set(default_stopwords())
    topics = [_make_words(cfg.topic_words, rng, taken) for _ in range(cfg.num_classes)]
    neutral = _make_words(cfg.neutral_words, rng, taken)
    stop = default_stopwords()
    p_topic = _zipf(cfg.topic_words, cfg.zipf_s)
    p_neutral = _zipf(cfg.neutral_words, 1.0)
    examples, true_labels = [], {}
    lo, hi = cfg.topic_per_sentence
    for i in range(cfg.n_examples):
        y = int(rng.integers(cfg.num_classes))
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        words = list(rng.choice(topics[y], size=int(rng.integers(lo, hi + 1)), p=p_topic))
        if rng.random() < cfg.distractor_prob:
            other = int(rng.choice([c for c in range(cfg.num_classes) if c != y]))
            words += list(rng.choice(topics[other], size=int(rng.integers(1, lo + 1)), p=p_topic))
        while len(words) < length:
            if rng.random() < cfg.stopword_frac:
                words.append(str(rng.choice(stop)))
            else:
                words.append(str(rng.choice(neutral, p=p_neutral)))
        words = [str(w) for w in rng.permutation(words)]
        text = " ".join(words) + " " + str(rng.choice([".", ".", ".", "!", "?"]))
        examples.append(Example(i, text, y))
        true_labels[i] = y
    flipped: set[int] = set()
    if cfg.flip_rate > 0:
        n_flip = int(round(cfg.flip_rate * cfg.n_examples))
        for i in rng.choice(cfg.n_examples, size=n_flip, replace=False):
            e = examples[i]
            new = int(rng.choice([c for c in range(cfg.num_classes) if c != e.label]))
            examples[i] = Example(e.id, e.text, new)
            flipped.add(int(i))
    names = [f"class{c}" for c in range(cfg.num_classes)]
    return SynthCorpus(Dataset(examples, cfg.num_classes, "train", names), flipped, true_labels, topics)
