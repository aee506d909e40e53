"""Non-gradient similarity kernels: TF-IDF cosine, embedding synonyms, optimal assignment."""
from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, Example

PAD_ID = 0


@dataclass
class TfIdfModel:
    """Raw term frequency times smoothed idf, ``ln((1+N)/(1+df)) + 1``, L2-normalized."""

    idf: dict[int, float]
    doc_count: int

    def default_idf(self) -> float:
        # a term never seen in training has df = 0
        return math.log(1.0 + self.doc_count) + 1.0

    def vector(self, token_ids: Sequence[int]) -> dict[int, float]:
        tf = Counter(int(t) for t in token_ids if t != PAD_ID)
        default = self.default_idf()
        v = {w: c * self.idf.get(w, default) for w, c in tf.items()}
        norm = math.sqrt(sum(x * x for x in v.values()))
        if norm == 0:
            return {}
        return {w: x / norm for w, x in v.items()}

    def to_json(self) -> dict:
        return {"doc_count": self.doc_count, "idf": {str(k): v for k, v in sorted(self.idf.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "TfIdfModel":
        return cls({int(k): float(v) for k, v in obj["idf"].items()}, int(obj["doc_count"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TfIdfModel":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def tfidf_fit(train: Dataset) -> TfIdfModel:
    df: Counter[int] = Counter()
    for ex in train:
        df.update({int(t) for t in ex.token_ids if t != PAD_ID})
    n = len(train)
    return TfIdfModel({w: math.log((1.0 + n) / (1.0 + c)) + 1.0 for w, c in df.items()}, n)


def tfidf_cosine(model: TfIdfModel, x: Example | Sequence[int], x2: Example | Sequence[int]) -> float:
    a = model.vector(x.token_ids if isinstance(x, Example) else x)
    b = model.vector(x2.token_ids if isinstance(x2, Example) else x2)
    if len(b) < len(a):
        a, b = b, a
    s = sum(v * b[w] for w, v in a.items() if w in b)
    return float(min(max(s, 0.0), 1.0))


# ---------------------------------------------------------------- synonyms


@dataclass(frozen=True)
class SynConfig:
    threshold: float = 0.7
    checkpoint_index: int = -1  # position within the selected checkpoints

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ValueError(f"synonym threshold must lie in (0, 1], got {self.threshold}")


class SynonymTable:
    """Cosine synonym predicate over the rows of an embedding table."""

    def __init__(self, embedding: np.ndarray, threshold: float = 0.7):
        if not 0 < threshold <= 1:
            raise ValueError(f"synonym threshold must lie in (0, 1], got {threshold}")
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.threshold = threshold
        self.norms = np.linalg.norm(self.embedding, axis=1)

    def cosine(self, w: int, w2: int) -> float:
        den = self.norms[w] * self.norms[w2]
        if den == 0:
            return float("nan")
        return float(self.embedding[w] @ self.embedding[w2] / den)

    def __call__(self, w: int, w2: int) -> bool:
        if w == w2:
            return True
        c = self.cosine(w, w2)
        if math.isnan(c):
            warnings.warn(f"zero-norm embedding for word {w if self.norms[w] == 0 else w2}; treated as non-synonym", RuntimeWarning)
            return False
        return c > self.threshold

    def matrix(self, words: Sequence[int], words2: Sequence[int]) -> np.ndarray:
        """Boolean |words| x |words2| synonym matrix."""
        return np.array([[self(a, b) for b in words2] for a in words], dtype=bool).reshape(len(words), len(words2))


def syn(embedding: np.ndarray, w: int, w2: int, threshold: float = 0.7) -> bool:
    return SynonymTable(embedding, threshold)(w, w2)


# ---------------------------------------------------------------- assignment


@dataclass
class Assignment:
    mapping: list[int]  # row i is matched to column mapping[i]
    objective: float


def solve_assignment(cost: np.ndarray) -> Assignment:
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting paths with row/column potentials, O(k^3).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"assignment needs a square cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment costs must be finite")
    n = cost.shape[0]
    if n == 0:
        return Assignment([], 0.0)
    inf = math.inf
    # 1-based arrays; column 0 is a virtual start column
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    mapping = [0] * n
    for j in range(1, n + 1):
        mapping[match[j] - 1] = j - 1
    return Assignment(mapping, math.fsum(cost[i, mapping[i]] for i in range(n)))
