"""(length, direction) vocabularies, feature vectors and instance sampling."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .core import Dataset, Direction, PacketRecord
from .errors import EmptyPool

Key = tuple[int, Direction]

_DIR_RANK = {Direction.TO_SERVICE: 0, Direction.FROM_SERVICE: 1}


class FeatureKind(str, enum.Enum):
    BINARY = "binary"
    COUNTS = "counts"


def _sort_key(key: Key):
    return key[0], _DIR_RANK[key[1]]


class Vocabulary:
    """Ordered (payload_length, direction) keys plus one trailing out-of-vocabulary slot."""

    def __init__(self, keys: Iterable[Key]):
        keys = tuple((int(n), Direction(d)) for n, d in keys)
        if len(set(keys)) != len(keys):
            raise ValueError("vocabulary keys must be unique")
        self.keys = keys
        self.index = {k: i for i, k in enumerate(keys)}
        self.oov_index = len(keys)

    def __len__(self) -> int:
        return len(self.keys) + 1

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.keys == other.keys

    def __hash__(self) -> int:
        return hash(self.keys)

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.keys)} keys + OOV)"

    def lookup(self, key: Key) -> int:
        return self.index.get(key, self.oov_index)

    def encode(self, packets: Iterable[PacketRecord]) -> np.ndarray:
        return np.fromiter(
            (self.index.get((p.payload_length, p.direction), self.oov_index) for p in packets),
            dtype=np.int64,
        )

    def to_list(self) -> list:
        return [[n, d.value] for n, d in self.keys]

    @classmethod
    def from_list(cls, items) -> "Vocabulary":
        return cls((int(n), Direction(d)) for n, d in items)


def build_vocabulary(source: Union[Dataset, Iterable[PacketRecord]]) -> Vocabulary:
    if isinstance(source, Dataset):
        packets = (p for t in source.traces for p in t.packets)
    else:
        packets = source
    keys = {(p.payload_length, p.direction) for p in packets}
    if not keys:
        raise ValueError("cannot build a vocabulary from no packets")
    return Vocabulary(sorted(keys, key=_sort_key))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    kind: FeatureKind
    values: np.ndarray
    vocabulary: Vocabulary

    def __post_init__(self):
        if len(self.values) != len(self.vocabulary):
            raise ValueError("feature vector length does not match its vocabulary")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureVector)
            and self.kind == other.kind
            and self.vocabulary == other.vocabulary
            and np.array_equal(self.values, other.values)
        )


def sample_instance(pool: Sequence[PacketRecord], n: int, rng: np.random.Generator) -> list[PacketRecord]:
    """n packets drawn uniformly with replacement."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(pool) == 0:
        raise EmptyPool("cannot sample from an empty pool")
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def extract(packets: Iterable[PacketRecord], vocab: Vocabulary, kind: FeatureKind) -> FeatureVector:
    counts = np.bincount(vocab.encode(packets), minlength=len(vocab)).astype(np.int64)
    if FeatureKind(kind) is FeatureKind.BINARY:
        counts = np.minimum(counts, 1)
    return FeatureVector(FeatureKind(kind), counts, vocab)


# --- batched helpers used by the evaluation harness -------------------------

def sample_index_instances(pool: np.ndarray, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """(m, n) matrix of vocabulary indices, each row one instance drawn with replacement."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(pool) == 0:
        raise EmptyPool("cannot sample from an empty pool")
    return pool[rng.integers(0, len(pool), size=(m, n))]


def count_matrix(index_rows: np.ndarray, size: int) -> np.ndarray:
    """Per-row occurrence counts of each vocabulary index."""
    m = index_rows.shape[0]
    flat = (index_rows + (np.arange(m) * size)[:, None]).ravel()
    return np.bincount(flat, minlength=m * size).reshape(m, size)


def as_kind(counts: np.ndarray, kind: FeatureKind) -> np.ndarray:
    return np.minimum(counts, 1) if FeatureKind(kind) is FeatureKind.BINARY else counts
