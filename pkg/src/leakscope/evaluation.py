"""Cross-validation harness, metrics and the N-packet sweep."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .classifiers import (
    Fallback,
    LinearModel,
    NBKind,
    build_lookup_from_pairs,
    fit_linear,
    train_nb_matrix,
)
from .core import Dataset, LabeledTrace, PacketRecord
from .errors import ClassWithNoInstances, DegenerateFit, EmptyMatrix, TooFewPerClass
from .features import as_kind, build_vocabulary, count_matrix, sample_index_instances
from .ingest import trace_to_dict

log = logging.getLogger(__name__)

DEFAULT_INSTANCES_PER_N = 1024
DEFAULT_N_VALUES = tuple(range(1, 51))


@dataclass
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # counts[true, predicted]

    @classmethod
    def empty(cls, classes: Sequence[str]) -> "ConfusionMatrix":
        return cls(tuple(classes), np.zeros((len(classes), len(classes)), dtype=np.int64))

    def add(self, true_idx, pred_idx) -> None:
        np.add.at(self.counts, (np.asarray(true_idx), np.asarray(pred_idx)), 1)

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise ValueError("class lists differ")
        self.counts = self.counts + other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def rates(self) -> np.ndarray:
        rows = self.row_sums()[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, self.counts / np.where(rows > 0, rows, 1), 0.0)

    def recall(self) -> dict[str, float]:
        r = self.rates()
        return {c: float(r[i, i]) for i, c in enumerate(self.classes) if self.row_sums()[i] > 0}

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConfusionMatrix":
        return cls(tuple(d["classes"]), np.asarray(d["counts"], dtype=np.int64))


def accuracy(cm: ConfusionMatrix) -> float:
    """Diagonal mass over all evaluated instances."""
    total = cm.total
    if total < 1:
        raise EmptyMatrix("confusion matrix has no instances")
    return float(np.trace(cm.counts)) / total


@dataclass(frozen=True)
class CurvePoint:
    n_packets: int
    accuracy: float
    instance_count: int


@dataclass
class AccuracyCurve:
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self):
        ns = [p.n_packets for p in self.points]
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("curve n values must be strictly increasing")

    def at(self, n: int) -> float:
        for p in self.points:
            if p.n_packets == n:
                return p.accuracy
        raise KeyError(n)

    def to_csv(self) -> str:
        lines = ["n,accuracy,count"]
        lines += [f"{p.n_packets},{p.accuracy!r},{p.instance_count}" for p in self.points]
        return "\n".join(lines) + "\n"

    def to_list(self) -> list:
        return [{"n": p.n_packets, "accuracy": p.accuracy, "count": p.instance_count} for p in self.points]


@dataclass
class GroupError:
    mae: float
    baseline_mae: float  # constant training-mean predictor
    count: int
    slope: float
    intercept: float


@dataclass
class RegressionReport:
    groups: dict[str, GroupError]

    @property
    def overall(self) -> float:
        """Mean of the per-group errors."""
        return float(np.mean([g.mae for g in self.groups.values()])) if self.groups else float("nan")

    def to_dict(self) -> dict:
        return {
            "overall_mae": self.overall,
            "groups": {
                k: {"mae": g.mae, "baseline_mae": g.baseline_mae, "count": g.count,
                    "slope": g.slope, "intercept": g.intercept}
                for k, g in sorted(self.groups.items())
            },
        }


# --- folds ------------------------------------------------------------------

def _canonical(trace: LabeledTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True, separators=(",", ":"))


def default_stratum(trace: LabeledTrace) -> Hashable:
    lab = trace.label
    return (lab.service.value, lab.os.value, lab.action.value,
            lab.language.value if lab.language else "", trace.direction.value if trace.direction else "")


def kfold_indices(traces: Sequence[LabeledTrace], k: int, seed: int,
                  stratum: Callable[[LabeledTrace], Hashable] = default_stratum) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified split into k (train, test) index pairs.

    Traces are put in content order inside each stratum before the seeded
    shuffle, so the same multiset of traces always yields the same folds.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    groups: dict[Hashable, list[int]] = {}
    for i, t in enumerate(traces):
        groups.setdefault(stratum(t), []).append(i)
    for key, idx in groups.items():
        if len(idx) < k:
            raise TooFewPerClass(f"stratum {key} has {len(idx)} traces, need >= {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(traces), dtype=np.int64)
    for key in sorted(groups, key=repr):
        idx = sorted(groups[key], key=lambda i: _canonical(traces[i]))
        perm = rng.permutation(len(idx))
        for pos, j in enumerate(perm):
            fold_of[idx[j]] = pos % k
    all_idx = np.arange(len(traces))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def kfold(dataset: Dataset, k: int = 10, rng_seed: int = 0,
          stratum: Callable[[LabeledTrace], Hashable] = default_stratum) -> list[tuple[Dataset, Dataset]]:
    traces = dataset.traces
    out = []
    for train, test in kfold_indices(traces, k, rng_seed, stratum):
        out.append((dataset.with_traces(traces[i] for i in train), dataset.with_traces(traces[i] for i in test)))
    return out


# --- instance-sampling sweep ------------------------------------------------

PacketClassFn = Callable[[LabeledTrace, PacketRecord], Optional[str]]


@dataclass(frozen=True)
class ClassifierSpec:
    """How a dataset becomes a naive Bayes task: classes, packet labelling and model kind."""

    name: str
    classes: tuple[str, ...]
    packet_class: PacketClassFn
    kind: NBKind
    stratum: Callable[[LabeledTrace], Hashable] = default_stratum
    alpha: float = 1.0
    score: Optional[Callable[[str, str], bool]] = None  # custom correctness, e.g. ignore direction


@dataclass
class _FoldData:
    vocab_size: int
    train_pools: list[np.ndarray]
    test_pools: list[np.ndarray]


def _fold_pools(traces, train_idx, test_idx, spec: ClassifierSpec) -> _FoldData:
    cls_index = {c: i for i, c in enumerate(spec.classes)}

    def collect(idx):
        per_class: list[list[PacketRecord]] = [[] for _ in spec.classes]
        for i in idx:
            t = traces[i]
            for p in t.packets:
                c = spec.packet_class(t, p)
                if c is not None:
                    per_class[cls_index[c]].append(p)
        return per_class

    train = collect(train_idx)
    test = collect(test_idx)
    empty = [spec.classes[i] for i, ps in enumerate(train) if not ps]
    if empty:
        raise ClassWithNoInstances(f"{spec.name}: no training packets for {empty}")
    vocab = build_vocabulary(p for ps in train for p in ps)
    return _FoldData(len(vocab), [vocab.encode(ps) for ps in train], [vocab.encode(ps) for ps in test])


@dataclass
class SweepResult:
    curve: AccuracyCurve
    confusion: dict[int, ConfusionMatrix]

    def to_dict(self) -> dict:
        return {
            "curve": self.curve.to_list(),
            "confusion": {str(n): cm.to_dict() for n, cm in sorted(self.confusion.items())},
        }


def _per_class(total: float, k: int, n_classes: int) -> int:
    return max(1, int(round(total / (k * n_classes))))


def _run_fold(fold: _FoldData, f: int, n: int, spec: ClassifierSpec, seed: int,
              m_train: int, m_test: int) -> np.ndarray:
    rng = np.random.default_rng([seed, f, n])
    C = len(spec.classes)
    Xs, ys = [], []
    for c, pool in enumerate(fold.train_pools):
        Xs.append(count_matrix(sample_index_instances(pool, n, m_train, rng), fold.vocab_size))
        ys.append(np.full(m_train, c))
    kind = spec.kind.feature_kind
    model = train_nb_matrix(as_kind(np.vstack(Xs), kind), np.concatenate(ys), C, spec.kind, spec.alpha,
                            spec.classes)
    counts = np.zeros((C, C), dtype=np.int64)
    for c, pool in enumerate(fold.test_pools):
        if len(pool) == 0:
            continue
        X = as_kind(count_matrix(sample_index_instances(pool, n, m_test, rng), fold.vocab_size), kind)
        pred = model.predict_matrix(X)
        counts[c] += np.bincount(pred, minlength=C)
    return counts


def sweep(dataset: Dataset, spec: ClassifierSpec, n_values: Iterable[int] = DEFAULT_N_VALUES,
          instances_per_n: int = DEFAULT_INSTANCES_PER_N, seed: int = 0, k: int = 10, jobs: int = 1) -> SweepResult:
    """k-fold accuracy of a naive Bayes task as a function of packets per instance.

    Each (fold, n) work unit owns an rng seeded by (seed, fold, n), so the
    result does not depend on how units are scheduled across ``jobs`` threads.
    """
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values:
        raise ValueError("n_values must be non-empty")
    if instances_per_n < 1:
        raise ValueError("instances_per_n must be >= 1")
    traces = dataset.traces
    folds = kfold_indices(traces, k, seed, spec.stratum)
    fold_data = [_fold_pools(traces, tr, te, spec) for tr, te in folds]
    C = len(spec.classes)
    m_train = _per_class(instances_per_n * (k - 1), k, C)
    m_test = _per_class(instances_per_n, k, C)

    units = [(f, n) for n in n_values for f in range(k)]

    def work(unit):
        f, n = unit
        return _run_fold(fold_data[f], f, n, spec, seed, m_train, m_test)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, units))
    else:
        results = [work(u) for u in units]

    confusion = {n: ConfusionMatrix.empty(spec.classes) for n in n_values}
    for (f, n), counts in zip(units, results):
        confusion[n].counts += counts
    points = [CurvePoint(n, score_confusion(confusion[n], spec.score), confusion[n].total) for n in n_values]
    return SweepResult(AccuracyCurve(points), confusion)


def score_confusion(cm: ConfusionMatrix, score: Optional[Callable[[str, str], bool]] = None) -> float:
    if score is None:
        return accuracy(cm)
    if cm.total < 1:
        raise EmptyMatrix("confusion matrix has no instances")
    hits = sum(int(cm.counts[i, j]) for i, a in enumerate(cm.classes) for j, b in enumerate(cm.classes) if score(a, b))
    return hits / cm.total


# --- per-packet lookup evaluation ---------------------------------------------

def evaluate_lookup(dataset: Dataset, classes: Sequence[str], packet_class: PacketClassFn,
                    instances: int = 1250, k: int = 10, seed: int = 0,
                    fallback: Fallback = Fallback.NEAREST_LENGTH,
                    stratum: Callable[[LabeledTrace], Hashable] = default_stratum) -> ConfusionMatrix:
    """k-fold evaluation of the lookup table on single-packet instances.

    The table is built from every labelled training packet; test instances
    are drawn uniformly per class from that fold's test packets.
    """
    classes = tuple(classes)
    cls_index = {c: i for i, c in enumerate(classes)}
    traces = dataset.traces
    cm = ConfusionMatrix.empty(classes)
    m_test = _per_class(instances, k, len(classes))
    for f, (train_idx, test_idx) in enumerate(kfold_indices(traces, k, seed, stratum)):
        pairs = []
        for i in train_idx:
            t = traces[i]
            pairs += [(p.payload_length, c) for p in t.packets if (c := packet_class(t, p)) is not None]
        model = build_lookup_from_pairs(pairs, classes, fallback)
        pools: list[list[int]] = [[] for _ in classes]
        for i in test_idx:
            t = traces[i]
            for p in t.packets:
                c = packet_class(t, p)
                if c is not None:
                    pools[cls_index[c]].append(p.payload_length)
        rng = np.random.default_rng([seed, f])
        for c, pool in enumerate(pools):
            if not pool:
                continue
            draws = np.asarray(pool)[rng.integers(0, len(pool), size=m_test)]
            preds = [cls_index[model.classify(int(x))] for x in draws]
            cm.add(np.full(len(preds), c), preds)
    return cm


# --- regression ---------------------------------------------------------------

def regression_pairs(dataset: Dataset, group_key: Callable[[LabeledTrace], Optional[str]],
                     control_lengths: Iterable[int] = ()) -> dict[str, list[tuple[int, int]]]:
    """(content payload, plaintext chars or attachment bytes) per group.

    The content packet is the largest non-control packet of a Text or
    Image trace; traces mapped to a None group are skipped.
    """
    control = set(control_lengths)
    out: dict[str, list[tuple[int, int]]] = {}
    for t in dataset.traces:
        target = t.label.plaintext_chars if t.label.plaintext_chars is not None else t.label.attachment_bytes
        if target is None:
            continue
        key = group_key(t)
        if key is None:
            continue
        content = [p.payload_length for p in t.packets if p.payload_length not in control]
        if content:
            out.setdefault(key, []).append((max(content), target))
    return out


def _fit_or_mean(pts: np.ndarray) -> LinearModel:
    """OLS, or the mean predictor when every payload in the split is the same."""
    try:
        return fit_linear(pts)
    except DegenerateFit:
        log.debug("constant payload in training split; using the mean predictor")
        return LinearModel(0.0, float(pts[:, 1].mean()))


def evaluate_regression(source, group_key: Optional[Callable[[LabeledTrace], Optional[str]]] = None,
                        k: int = 10, seed: int = 0, control_lengths: Iterable[int] = ()) -> RegressionReport:
    """k-fold mean absolute error of OLS (payload -> target) per group.

    ``source`` is either a Dataset (grouped by ``group_key``) or a ready
    mapping of group -> (payload, target) pairs.
    """
    if isinstance(source, Dataset):
        if group_key is None:
            raise ValueError("group_key is required for a Dataset source")
        pairs_by_group = regression_pairs(source, group_key, control_lengths)
    else:
        pairs_by_group = source
    groups = {}
    for key in sorted(pairs_by_group):
        pts = np.asarray(pairs_by_group[key], dtype=float).reshape(-1, 2)
        if len(pts) < k:
            raise TooFewPerClass(f"group {key} has {len(pts)} samples, need >= {k}")
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        pts = pts[order]
        rng = np.random.default_rng([seed, len(pts)])
        fold_of = np.empty(len(pts), dtype=np.int64)
        fold_of[rng.permutation(len(pts))] = np.arange(len(pts)) % k
        errs, base = [], []
        for f in range(k):
            tr, te = pts[fold_of != f], pts[fold_of == f]
            m = _fit_or_mean(tr)
            errs.append(np.abs(m.predict(te[:, 0]) - te[:, 1]))
            base.append(np.abs(tr[:, 1].mean() - te[:, 1]))
        full = _fit_or_mean(pts)
        groups[key] = GroupError(float(np.concatenate(errs).mean()), float(np.concatenate(base).mean()),
                                 len(pts), full.slope, full.intercept)
    return RegressionReport(groups)
