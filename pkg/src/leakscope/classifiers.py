"""Binomial/multinomial naive Bayes, the payload-length lookup table and OLS length regression."""
from __future__ import annotations

import bisect
import enum
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import ACTION_ORDER, Action, Dataset
from .errors import (
    ClassWithNoInstances,
    DataError,
    DegenerateFit,
    FormatVersionMismatch,
    MixedVectorKinds,
    VocabularyMismatch,
)
from .features import FeatureKind, FeatureVector, Vocabulary
from .ingest import atomic_write_text

MODEL_FORMAT_VERSION = 1


class NBKind(str, enum.Enum):
    BINOMIAL = "binomial"
    MULTINOMIAL = "multinomial"

    @property
    def feature_kind(self) -> FeatureKind:
        return FeatureKind.BINARY if self is NBKind.BINOMIAL else FeatureKind.COUNTS


@dataclass(eq=False)
class NaiveBayesModel:
    kind: NBKind
    classes: tuple[str, ...]
    log_prior: np.ndarray            # (C,)
    log_p: np.ndarray                # (C, V): log p (binomial) or log event probability (multinomial)
    log_1mp: Optional[np.ndarray]    # (C, V): log(1 - p), binomial only
    alpha: float
    vocabulary: Optional[Vocabulary] = None

    @property
    def n_features(self) -> int:
        return self.log_p.shape[1]

    def joint_log_likelihood(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise VocabularyMismatch(f"vector has {X.shape[1]} features, model expects {self.n_features}")
        if self.kind is NBKind.BINOMIAL:
            # Absent features are scored with log(1 - p).
            jll = X @ self.log_p.T + (1.0 - X) @ self.log_1mp.T
        else:
            jll = X @ self.log_p.T
        return jll + self.log_prior

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Class indices; np.argmax keeps the first maximum, i.e. class order breaks ties."""
        return np.argmax(self.joint_log_likelihood(X), axis=1)

    def log_posterior_matrix(self, X: np.ndarray) -> np.ndarray:
        jll = self.joint_log_likelihood(X)
        top = jll.max(axis=1, keepdims=True)
        return jll - (top + np.log(np.exp(jll - top).sum(axis=1, keepdims=True)))


def train_nb_matrix(X: np.ndarray, y: Sequence[int], n_classes: int, kind: NBKind, alpha: float = 1.0,
                    classes: Optional[Sequence[str]] = None, vocabulary: Optional[Vocabulary] = None) -> NaiveBayesModel:
    """Fit from a dense (instances x features) matrix and integer class ids."""
    kind = NBKind(kind)
    if alpha <= 0:
        raise ValueError("smoothing alpha must be positive")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n_per_class = np.bincount(y, minlength=n_classes).astype(float)
    if (n_per_class == 0).any():
        missing = [classes[i] if classes else i for i in np.flatnonzero(n_per_class == 0)]
        raise ClassWithNoInstances(f"no training instances for class(es) {missing}")
    if kind is NBKind.BINOMIAL and ((X != 0) & (X != 1)).any():
        raise MixedVectorKinds("binomial naive Bayes needs binary vectors")
    onehot = np.zeros((n_classes, len(y)))
    onehot[y, np.arange(len(y))] = 1.0
    totals = onehot @ X  # (C, V) per-class feature sums
    log_prior = np.log(n_per_class) - np.log(n_per_class.sum())
    if kind is NBKind.BINOMIAL:
        denom = (n_per_class + 2 * alpha)[:, None]
        log_p = np.log(totals + alpha) - np.log(denom)
        log_1mp = np.log(n_per_class[:, None] - totals + alpha) - np.log(denom)
    else:
        V = X.shape[1]
        log_p = np.log(totals + alpha) - np.log(totals.sum(axis=1, keepdims=True) + alpha * V)
        log_1mp = None
    if classes is None:
        classes = [str(i) for i in range(n_classes)]
    return NaiveBayesModel(kind, tuple(classes), log_prior, log_p, log_1mp, float(alpha), vocabulary)


def train_nb(instances: Iterable[tuple[FeatureVector, str]], kind: NBKind, alpha: float = 1.0,
             classes: Optional[Sequence[str]] = None) -> NaiveBayesModel:
    instances = list(instances)
    if not instances:
        raise ClassWithNoInstances("no training instances")
    kind = NBKind(kind)
    vocab = instances[0][0].vocabulary
    for vec, _ in instances:
        if vec.kind is not kind.feature_kind:
            raise MixedVectorKinds(f"{kind.value} naive Bayes needs {kind.feature_kind.value} vectors, got {vec.kind.value}")
        if vec.vocabulary != vocab:
            raise VocabularyMismatch("training vectors do not share one vocabulary")
    if classes is None:
        classes = sorted({c for _, c in instances})
    index = {c: i for i, c in enumerate(classes)}
    X = np.stack([v.values for v, _ in instances])
    y = [index[c] for _, c in instances]
    return train_nb_matrix(X, y, len(classes), kind, alpha, classes, vocab)


def predict_nb(model: NaiveBayesModel, vector: FeatureVector) -> tuple[str, dict[str, float]]:
    """Return the predicted class and the normalised log-posterior of every class."""
    if vector.kind is not model.kind.feature_kind:
        raise VocabularyMismatch(f"{model.kind.value} model cannot score {vector.kind.value} vectors")
    if model.vocabulary is not None and vector.vocabulary != model.vocabulary:
        raise VocabularyMismatch("vector and model use different vocabularies")
    post = model.log_posterior_matrix(vector.values)[0]
    best = int(np.argmax(post))
    return model.classes[best], {c: float(v) for c, v in zip(model.classes, post)}


# --- lookup table -----------------------------------------------------------

class Fallback(str, enum.Enum):
    NEAREST_LENGTH = "nearest_length"
    CONTROL_CLASS = "control_class"


CONTROL = Action.CONTROL.value
DEFAULT_CLASS_ORDER = tuple(a.value for a in ACTION_ORDER)


@dataclass
class LookupTableModel:
    table: dict[int, dict[str, int]]
    classes: tuple[str, ...] = DEFAULT_CLASS_ORDER
    fallback: Fallback = Fallback.NEAREST_LENGTH
    _sorted: list[int] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        for length, counts in self.table.items():
            if sum(counts.values()) < 1:
                raise ValueError(f"length {length} stored with no occurrences")
        self._sorted = sorted(self.table)
        extra = sorted({c for counts in self.table.values() for c in counts} - set(self.classes))
        self.classes = tuple(self.classes) + tuple(extra)

    def _best(self, counts: Mapping[str, int]) -> str:
        rank = {c: i for i, c in enumerate(self.classes)}
        return min(counts, key=lambda c: (-counts[c], rank[c]))

    def nearest_length(self, length: int) -> int:
        """Closest stored length; ties go to the smaller one."""
        keys = self._sorted
        i = bisect.bisect_left(keys, length)
        cands = keys[max(i - 1, 0):i + 1]
        return min(cands, key=lambda k: (abs(k - length), k))

    def classify(self, length: int) -> str:
        counts = self.table.get(length)
        if counts is not None:
            return self._best(counts)
        if self.fallback is Fallback.CONTROL_CLASS or not self._sorted:
            return CONTROL
        return self._best(self.table[self.nearest_length(length)])


def build_lookup_from_pairs(pairs: Iterable[tuple[int, str]], classes: Sequence[str] = DEFAULT_CLASS_ORDER,
                            fallback: Fallback = Fallback.NEAREST_LENGTH) -> LookupTableModel:
    table: dict[int, Counter] = {}
    for length, cls in pairs:
        table.setdefault(int(length), Counter())[cls] += 1
    return LookupTableModel({k: dict(v) for k, v in table.items()}, tuple(classes), Fallback(fallback))


def packet_action_pairs(dataset: Dataset, control_lengths: Iterable[int] = ()) -> list[tuple[int, str]]:
    """(payload_length, class) for every packet; configured control lengths map to Control."""
    control = set(control_lengths)
    return [
        (p.payload_length, CONTROL if p.payload_length in control else t.label.action.value)
        for t in dataset.traces
        for p in t.packets
    ]


def build_lookup(training: Dataset, control_lengths: Iterable[int] = (),
                 fallback: Fallback = Fallback.NEAREST_LENGTH) -> LookupTableModel:
    return build_lookup_from_pairs(packet_action_pairs(training, control_lengths), fallback=fallback)


def classify_length(model: LookupTableModel, payload_length: int) -> str:
    return model.classify(payload_length)


# --- linear regression ------------------------------------------------------

@dataclass(frozen=True)
class LinearModel:
    slope: float
    intercept: float

    def predict(self, payload_length):
        return np.maximum(self.slope * np.asarray(payload_length, dtype=float) + self.intercept, 0.0)


def fit_linear(pairs: Iterable[tuple[float, float]]) -> LinearModel:
    """Ordinary least squares of plaintext length on payload length."""
    pts = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) < 2:
        raise DegenerateFit("need at least two distinct payload lengths")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    slope = float(dx @ (y - ym) / (dx @ dx))
    intercept = float(ym - slope * xm)
    if not (math.isfinite(slope) and math.isfinite(intercept)):
        raise DegenerateFit("non-finite coefficients")
    return LinearModel(slope, intercept)


def predict_length(model: LinearModel, payload_length: float) -> float:
    return float(model.predict(payload_length))


# --- serialization ----------------------------------------------------------

def model_to_dict(model) -> dict:
    head = {"format_version": MODEL_FORMAT_VERSION}
    if isinstance(model, NaiveBayesModel):
        return {
            "model_kind": "naive_bayes",
            **head,
            "kind": model.kind.value,
            "classes": list(model.classes),
            "alpha": model.alpha,
            "log_prior": model.log_prior.tolist(),
            "log_p": model.log_p.tolist(),
            "log_1mp": model.log_1mp.tolist() if model.log_1mp is not None else None,
            "vocabulary": model.vocabulary.to_list() if model.vocabulary is not None else None,
        }
    if isinstance(model, LookupTableModel):
        return {
            "model_kind": "lookup_table",
            **head,
            "classes": list(model.classes),
            "fallback": model.fallback.value,
            "table": [[k, model.table[k]] for k in sorted(model.table)],
        }
    if isinstance(model, LinearModel):
        return {"model_kind": "linear", **head, "slope": model.slope, "intercept": model.intercept}
    raise TypeError(f"cannot serialise {type(model).__name__}")


def model_from_dict(d: Mapping):
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatVersionMismatch(f"model format_version {d.get('format_version')}")
    kind = d.get("model_kind")
    if kind == "naive_bayes":
        vocab = Vocabulary.from_list(d["vocabulary"]) if d.get("vocabulary") is not None else None
        log_1mp = np.asarray(d["log_1mp"], dtype=float) if d.get("log_1mp") is not None else None
        return NaiveBayesModel(
            NBKind(d["kind"]), tuple(d["classes"]), np.asarray(d["log_prior"], dtype=float),
            np.asarray(d["log_p"], dtype=float), log_1mp, float(d["alpha"]), vocab,
        )
    if kind == "lookup_table":
        table = {int(k): {str(c): int(n) for c, n in counts.items()} for k, counts in d["table"]}
        return LookupTableModel(table, tuple(d["classes"]), Fallback(d["fallback"]))
    if kind == "linear":
        return LinearModel(float(d["slope"]), float(d["intercept"]))
    raise DataError(f"unknown model_kind {kind!r}")


def save_model(model, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
