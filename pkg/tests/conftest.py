import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tracinwe.corpus import Dataset, Example, Vocab, build_vocab, split
from tracinwe.synth import SynthConfig, make_corpus
from tracinwe.textmodel import ModelConfig, TrainConfig, fit, init_model

settings.register_profile("repo", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


class Tiny:
    """A small trained classifier with its data, shared by the unit tests."""

    def __init__(self):
        corpus = make_corpus(SynthConfig(n_examples=160, num_classes=3, topic_words=15, neutral_words=40, seed=3))
        self.corpus = corpus
        tr, va, te = split(corpus.dataset, 0, (0.7, 0.1, 0.2))
        self.vocab = build_vocab([e.text for e in tr])
        self.vocab.max_len = 24
        self.train, self.val, self.test = tr.encode(self.vocab), va.encode(self.vocab), te.encode(self.vocab)
        self.config = ModelConfig(len(self.vocab), 3, embed_dim=8, conv_specs=((3, 4), (1, 5)), seed=1)
        self.hyper = TrainConfig(epochs=3, batch_size=16, lr=0.05, momentum=0.9, seed=1)
        self.ckpts = fit(self.config, self.train, self.hyper)
        self.model = self.ckpts.final_model()


@pytest.fixture(scope="session")
def tiny() -> Tiny:
    return Tiny()


def random_model(seed: int, vocab_size: int = 30, classes: int = 3, l2: float = 0.0) -> "object":
    cfg = ModelConfig(vocab_size, classes, embed_dim=5, conv_specs=((3, 4), (1, 3)), l2_lambda=l2, seed=seed)
    model = init_model(cfg)
    rng = np.random.default_rng(seed)
    for v in model.params.values():  # move biases off zero so ReLU kinks are not on the grid
        v += 0.05 * rng.standard_normal(v.shape)
    return model


def random_example(rng: np.random.Generator, vocab_size: int = 30, max_len: int = 12, classes: int = 3, ex_id: int = 0) -> Example:
    n = int(rng.integers(1, max_len - 1))
    words = rng.integers(4, vocab_size, size=n).tolist()
    ids = [1, *words, 2] + [0] * (max_len - n - 2)
    return Example(ex_id, " ".join(f"w{w}" for w in words), int(rng.integers(classes)), tuple(ids))


# ---------------------------------------------------------------- acceptance summary lines

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
