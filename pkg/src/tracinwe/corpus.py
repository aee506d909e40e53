"""Tokenization, vocabularies, dataset loading and deterministic splits."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, START, END, UNK = "[PAD]", "[START]", "[END]", "[UNK]"
SPECIALS = (PAD, START, END, UNK)
DEFAULT_MAX_LEN = 64
COMMON_PUNCT = (".", ",", "!", "?")

# letter/digit runs, or any single non-space non-word char (underscore counts as punct)
_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_")


class ConfigError(ValueError):
    """Invalid configuration value."""


class DatasetFormatError(ValueError):
    """Malformed dataset record."""


def default_stopwords() -> list[str]:
    text = resources.files("tracinwe").joinpath("data/stopwords.txt").read_text("utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str]
    common_words: tuple[str, ...] = ()
    max_len: int = DEFAULT_MAX_LEN
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:4]) != list(SPECIALS):
            raise ConfigError(f"vocab must start with {SPECIALS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocab")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for [START] and [END]")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def start_id(self) -> int:
        return 1

    @property
    def end_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def special_ids(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(SPECIALS)}

    @property
    def common_set(self) -> frozenset[int]:
        ids = {self.start_id, self.end_id}
        ids.update(self.index[w] for w in self.common_words if w in self.index)
        return frozenset(ids)

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def decode(self, ids: Iterable[int], skip_pad: bool = True) -> list[str]:
        return [self.tokens[i] for i in ids if not (skip_pad and i == self.pad_id)]

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "special_ids": self.special_ids,
            "common_words": list(self.common_words),
            "common_set": sorted(self.common_set),
            "max_len": self.max_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(list(obj["tokens"]), tuple(obj["common_words"]), int(obj["max_len"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def tokenize(text: str, vocab: Vocab) -> tuple[int, ...]:
    """Encode ``text`` as [START] words... [END] padded with [PAD] to ``vocab.max_len``."""
    words = split_words(text)[: vocab.max_len - 2]
    ids = [vocab.start_id, *(vocab.id_of(w) for w in words), vocab.end_id]
    ids += [vocab.pad_id] * (vocab.max_len - len(ids))
    return tuple(ids)


def build_vocab(
    texts: Iterable[str],
    max_size: int = 20000,
    min_freq: int = 1,
    common_words: Sequence[str] | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> Vocab:
    """Frequency-ranked vocabulary; ties broken alphabetically. Specials always come first."""
    if max_size < len(SPECIALS) + 1:
        raise ConfigError(f"max_size={max_size} cannot fit the {len(SPECIALS)} special tokens")
    counts = Counter()
    n = 0
    for t in texts:
        counts.update(split_words(t))
        n += 1
    if n == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    ranked = [w for w in ranked if w not in SPECIALS][: max_size - len(SPECIALS)]
    if common_words is None:
        common_words = (*COMMON_PUNCT, *default_stopwords())
    return Vocab([*SPECIALS, *ranked], tuple(common_words), max_len)


@dataclass(frozen=True)
class Example:
    id: int
    text: str
    label: int
    token_ids: tuple[int, ...] = ()

    @property
    def length(self) -> int:
        """Number of non-pad positions."""
        n = len(self.token_ids)
        while n and self.token_ids[n - 1] == 0:
            n -= 1
        return n

    def words(self) -> tuple[int, ...]:
        return self.token_ids[: self.length]


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int
    split_tag: str = "train"
    label_names: list[str] | None = None

    def __post_init__(self):
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("example ids must be unique")
        for e in self.examples:
            if not 0 <= e.label < self.num_classes:
                raise DatasetFormatError(f"example {e.id}: label {e.label} out of range")
        self._by_id = {e.id: e for e in self.examples}

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    def by_id(self, example_id: int) -> Example:
        return self._by_id[example_id]

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def encode(self, vocab: Vocab) -> "Dataset":
        exs = [replace(e, token_ids=tokenize(e.text, vocab)) for e in self.examples]
        return Dataset(exs, self.num_classes, self.split_tag, self.label_names)

    def subset(self, ids: Iterable[int], split_tag: str | None = None) -> "Dataset":
        keep = set(ids)
        exs = [e for e in self.examples if e.id in keep]
        return Dataset(exs, self.num_classes, split_tag or self.split_tag, self.label_names)

    def without(self, ids: Iterable[int]) -> "Dataset":
        drop = set(ids)
        exs = [e for e in self.examples if e.id not in drop]
        return Dataset(exs, self.num_classes, self.split_tag, self.label_names)

    def with_replaced(self, new_examples: Iterable[Example]) -> "Dataset":
        repl = {e.id: e for e in new_examples}
        exs = [repl.get(e.id, e) for e in self.examples]
        return Dataset(exs, self.num_classes, self.split_tag, self.label_names)

    def token_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids, lengths) arrays; ids is N x max_len."""
        ids = np.array([e.token_ids for e in self.examples], dtype=np.int64)
        lengths = np.array([e.length for e in self.examples], dtype=np.int64)
        return ids, lengths


def _label_map_for(raw_labels: Sequence[str]) -> dict[str, int]:
    uniq = sorted(set(raw_labels))
    if all(re.fullmatch(r"\d+", lab) for lab in uniq):
        return {lab: int(lab) for lab in uniq}
    return {lab: i for i, lab in enumerate(uniq)}


def load_dataset(
    path: str | Path,
    format: str | None = None,
    label_map: dict[str, int] | None = None,
    vocab: Vocab | None = None,
    split_tag: str = "train",
) -> tuple[Dataset, dict[str, int]]:
    """Read a TSV (``label<TAB>text``) or JSONL (``{"label", "text"}``) file.

    Integer-looking labels keep their value as class id; other labels are
    numbered in sorted order. Passing ``label_map`` (e.g. the train map when
    loading val/test) makes unknown labels an error. Returns the dataset and
    the label map used.
    """
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "tsv"
    if format not in ("tsv", "jsonl"):
        raise ConfigError(f"unknown dataset format {format!r}")
    records: list[tuple[int | None, str, str]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if format == "tsv":
                parts = line.split("\t")
                if len(parts) == 2:
                    rid, (lab, text) = None, parts
                elif len(parts) == 3 and parts[0].isdigit():
                    rid, lab, text = int(parts[0]), parts[1], parts[2]
                else:
                    raise DatasetFormatError(f"{path}:{lineno}: expected 'label<TAB>text'")
            else:
                try:
                    obj = json.loads(line)
                    lab, text = obj["label"], obj["text"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DatasetFormatError(f"{path}:{lineno}: bad JSON record ({exc})") from None
                if not isinstance(text, str) or not isinstance(lab, (str, int)) or isinstance(lab, bool):
                    raise DatasetFormatError(f"{path}:{lineno}: label must be str|int, text str")
                rid = obj.get("id")
            records.append((rid, str(lab).strip(), text))
    if label_map is None:
        label_map = _label_map_for([r[1] for r in records])
    else:
        for lineno, (_, lab, _) in enumerate(records, 1):
            if lab not in label_map:
                raise DatasetFormatError(f"{path}: record {lineno}: label {lab!r} not in label map")
    num_classes = max(label_map.values()) + 1 if label_map else 0
    names = [""] * num_classes
    for lab, i in label_map.items():
        names[i] = lab
    exs = []
    for i, (rid, lab, text) in enumerate(records):
        ex = Example(rid if rid is not None else i, text, label_map[lab])
        exs.append(ex)
    ds = Dataset(exs, num_classes, split_tag, names)
    if vocab is not None:
        ds = ds.encode(vocab)
    return ds, label_map


def write_dataset(ds: Dataset, path: str | Path, format: str = "jsonl") -> None:
    """Write ``ds`` so that :func:`load_dataset` restores ids, texts and labels."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for e in ds.examples:
            if format == "jsonl":
                fh.write(json.dumps({"id": e.id, "label": e.label, "text": e.text}) + "\n")
            else:
                if "\t" in e.text or "\n" in e.text:
                    raise DatasetFormatError(f"example {e.id}: text not representable in TSV")
                fh.write(f"{e.id}\t{e.label}\t{e.text}\n")


def split(
    dataset: Dataset, seed: int, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded random train/val/test partition."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split sizes {n_train}/{n_val}/{n_test} leave an empty split")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.split(order, [n_train, n_train + n_val])
    out = []
    for idx, tag in zip(parts, ("train", "val", "test")):
        exs = [dataset.examples[i] for i in sorted(idx)]
        out.append(Dataset(exs, dataset.num_classes, tag, dataset.label_names))
    missing = set(range(dataset.num_classes)) - {e.label for e in out[0]}
    if missing:
        raise ConfigError(f"train split lacks classes {sorted(missing)}; change the seed or fractions")
    return out[0], out[1], out[2]
