"""Padding countermeasures, their byte overhead, and before/after attack scores."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import experiments as ex
from .core import Dataset, LabeledTrace, Service
from .errors import ConfigError, MaxTooSmall, ShapeMismatch

log = logging.getLogger(__name__)

AUTO = "auto"
ATTACKS = ("os", "action", "language", "length")


class PaddingKind(str, enum.Enum):
    NONE = "none"
    BLOCK_QUANTIZE = "block_quantize"
    UNIFORM_TO_MAX = "uniform_to_max"


@dataclass(frozen=True)
class PaddingStrategy:
    """``max`` is an int or ``"auto"`` (largest payload per service in the fit data)."""

    kind: PaddingKind = PaddingKind.NONE
    block: Optional[int] = None
    max: Union[int, str, None] = None

    def __post_init__(self):
        kind = PaddingKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is PaddingKind.BLOCK_QUANTIZE:
            if not isinstance(self.block, int) or self.block < 1:
                raise ConfigError("block_quantize needs an integer block >= 1")
        if kind is PaddingKind.UNIFORM_TO_MAX:
            m = AUTO if self.max is None else self.max
            if m != AUTO and (not isinstance(m, int) or isinstance(m, bool) or m < 1):
                raise ConfigError(f"uniform_to_max max must be 'auto' or a positive integer, got {m!r}")
            object.__setattr__(self, "max", m)

    @classmethod
    def none(cls) -> "PaddingStrategy":
        return cls(PaddingKind.NONE)

    @classmethod
    def block_quantize(cls, block: int) -> "PaddingStrategy":
        return cls(PaddingKind.BLOCK_QUANTIZE, block=block)

    @classmethod
    def uniform_to_max(cls, max: Union[int, str] = AUTO) -> "PaddingStrategy":
        return cls(PaddingKind.UNIFORM_TO_MAX, max=max)

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        if self.kind is PaddingKind.BLOCK_QUANTIZE:
            d["block"] = self.block
        elif self.kind is PaddingKind.UNIFORM_TO_MAX:
            d["max"] = self.max
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PaddingStrategy":
        """Accepts either the bare strategy or ``{"padding": {...}}``."""
        if not isinstance(d, Mapping):
            raise ConfigError("padding must be a JSON object")
        if "padding" in d:
            d = d["padding"]
        try:
            kind = PaddingKind(d.get("kind", "none"))
        except ValueError as e:
            raise ConfigError(f"unknown padding kind {d.get('kind')!r}") from e
        unknown = set(d) - {"kind", "block", "max"}
        if unknown:
            raise ConfigError(f"unknown padding keys: {sorted(unknown)}")
        return cls(kind, block=d.get("block"), max=d.get("max"))


def service_maxima(dataset: Dataset) -> dict[Service, int]:
    out: dict[Service, int] = {}
    for t in dataset.traces:
        m = max(p.payload_length for p in t.packets)
        if m > out.get(t.label.service, 0):
            out[t.label.service] = m
    return out


def resolve_maxima(strategy: PaddingStrategy, fit: Dataset) -> dict[Service, int]:
    if strategy.kind is not PaddingKind.UNIFORM_TO_MAX:
        raise ValueError("only uniform_to_max has a maximum")
    if strategy.max == AUTO:
        return service_maxima(fit)
    return {s: int(strategy.max) for s in Service}


def apply_padding(dataset: Dataset, strategy: PaddingStrategy, seed: int = 0,
                  fit: Optional[Dataset] = None) -> Dataset:
    """Pad every payload; labels, timestamps and packet order are untouched.

    Uniform padding draws from an rng derived from (seed, trace index), so
    the result does not depend on how traces are batched.  ``fit`` supplies
    the per-service maxima for ``max="auto"`` and defaults to ``dataset``.
    """
    kind = strategy.kind
    if kind is PaddingKind.NONE:
        return dataset
    maxima = resolve_maxima(strategy, fit if fit is not None else dataset) \
        if kind is PaddingKind.UNIFORM_TO_MAX else {}
    traces = []
    for i, t in enumerate(dataset.traces):
        lens = np.fromiter((p.payload_length for p in t.packets), dtype=np.int64)
        if kind is PaddingKind.BLOCK_QUANTIZE:
            b = strategy.block
            new = -(-lens // b) * b
        else:
            top = maxima.get(t.label.service)
            if top is None or lens.max() > top:
                raise MaxTooSmall(
                    f"trace {i}: payload {int(lens.max())} exceeds padding max {top} for {t.label.service.value}"
                )
            rng = np.random.default_rng([seed, i])
            new = lens + rng.integers(0, top - lens + 1)
        packets = tuple(
            p if p.payload_length == n else replace(p, payload_length=int(n))
            for p, n in zip(t.packets, new)
        )
        traces.append(LabeledTrace(packets, t.label))
    meta = dict(dataset.metadata)
    meta["padding"] = strategy.to_dict()
    meta["padding_seed"] = seed
    return Dataset(tuple(traces), meta)


# --- overhead -------------------------------------------------------------------

@dataclass(frozen=True)
class OverheadGroup:
    messages: int
    original_bytes: float
    added_bytes: float

    @property
    def mean_added(self) -> float:
        return self.added_bytes / self.messages if self.messages else 0.0

    @property
    def percent(self) -> float:
        return 100.0 * self.added_bytes / self.original_bytes if self.original_bytes else 0.0

    def to_dict(self) -> dict:
        return {"messages": self.messages, "original_bytes": self.original_bytes,
                "added_bytes": self.added_bytes, "mean_added_bytes": self.mean_added,
                "percent": self.percent}


@dataclass(frozen=True)
class OverheadReport:
    """Added bytes per message (one trace), overall and per "service/os"."""

    groups: dict[str, OverheadGroup]

    @property
    def total(self) -> OverheadGroup:
        g = self.groups.values()
        return OverheadGroup(sum(x.messages for x in g), sum(x.original_bytes for x in g),
                             sum(x.added_bytes for x in g))

    @property
    def mean_added(self) -> float:
        return self.total.mean_added

    @property
    def percent(self) -> float:
        return self.total.percent

    def to_dict(self) -> dict:
        return {"mean_added_bytes": self.mean_added, "percent": self.percent,
                "groups": {k: v.to_dict() for k, v in sorted(self.groups.items())}}


def _group(trace: LabeledTrace) -> str:
    return f"{trace.label.service.value}/{trace.label.os.value}"


def _report(rows: Iterable[tuple[str, float, float]]) -> OverheadReport:
    acc: dict[str, list] = {}
    for g, orig, added in rows:
        a = acc.setdefault(g, [0, 0.0, 0.0])
        a[0] += 1
        a[1] += orig
        a[2] += added
    return OverheadReport({g: OverheadGroup(n, o, a) for g, (n, o, a) in acc.items()})


def overhead(original: Dataset, padded: Dataset) -> OverheadReport:
    if len(original.traces) != len(padded.traces):
        raise ShapeMismatch("original and padded datasets differ in trace count")
    rows = []
    for a, b in zip(original.traces, padded.traces):
        if len(a.packets) != len(b.packets):
            raise ShapeMismatch("original and padded traces differ in packet count")
        orig = sum(p.payload_length for p in a.packets)
        rows.append((_group(a), orig, sum(p.payload_length for p in b.packets) - orig))
    return _report(rows)


def expected_overhead(dataset: Dataset, strategy: PaddingStrategy,
                      fit: Optional[Dataset] = None) -> OverheadReport:
    """Closed-form expectation of uniform padding: sum of (max - len) / 2 per message."""
    maxima = resolve_maxima(strategy, fit if fit is not None else dataset)
    rows = []
    for t in dataset.traces:
        top = maxima[t.label.service]
        orig = sum(p.payload_length for p in t.packets)
        rows.append((_group(t), orig, sum(top - p.payload_length for p in t.packets) / 2))
    return _report(rows)


# --- before / after -------------------------------------------------------------

@dataclass(frozen=True)
class MetricPair:
    metric: str
    before: float
    after: float
    chance: Optional[float] = None
    baseline_after: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"metric": self.metric, "before": self.before, "after": self.after}
        if self.chance is not None:
            d["chance"] = self.chance
        if self.baseline_after is not None:
            d["baseline_after"] = self.baseline_after
        return d


@dataclass
class CountermeasureResult:
    strategy: PaddingStrategy
    overhead: OverheadReport
    expected: Optional[OverheadReport]
    metrics: dict[str, MetricPair] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "padding": self.strategy.to_dict(),
            "overhead": self.overhead.to_dict(),
            "expected_overhead": self.expected.to_dict() if self.expected is not None else None,
            "attacks": {k: v.to_dict() for k, v in self.metrics.items()},
        }


def _attack_scores(dataset: Dataset, attack: str, reference: Optional[Dataset], opts: Mapping):
    """(score, chance, baseline) for one attack on ``dataset``."""

    seed, k, jobs = opts["seed"], opts["k"], opts["jobs"]
    if attack == "os":
        n = opts["os_n"]
        res = ex.run_os_fingerprint(dataset, [n], opts["instances_per_n"], k, seed, jobs,
                                    reference=reference, os_only=True)
        return res.curve.at(n), 0.5, None
    if attack == "action":
        res = ex.run_action_classify(dataset, k, opts["action_instances"], seed, reference=reference)
        chances = [1.0 / int(np.count_nonzero(cm.row_sums())) for cm in res.confusion.values()]
        return res.macro_accuracy, float(np.mean(chances)), None
    if attack == "language":
        n = opts["language_n"]
        res = ex.run_language_classify(dataset, [n], opts["instances_per_n"], k, seed, jobs, reference=reference)
        if not res:
            return None
        scores = [r.curve.at(n) for r in res.values()]
        chances = [1.0 / len(r.confusion[n].classes) for r in res.values()]
        return float(np.mean(scores)), float(np.mean(chances)), None
    if attack == "length":
        rep = ex.run_length_regress(dataset, k, seed, reference=reference)
        if not rep.groups:
            return None
        base = float(np.mean([g.baseline_mae for g in rep.groups.values()]))
        return rep.overall, None, base
    raise ConfigError(f"unknown attack {attack!r}; expected one of {ATTACKS}")


def evaluate_countermeasure(dataset: Dataset, strategy: PaddingStrategy,
                            attacks: Sequence[str] = ATTACKS, seed: int = 0, k: int = 10,
                            jobs: int = 1, os_n: int = 5, language_n: int = 100,
                            instances_per_n: int = 1024, action_instances: int = 1250) -> CountermeasureResult:
    """Run each attack on the original and on the padded dataset.

    Attacks on padded traffic read packet classes (control vs. message) from
    the original capture, so padding cannot hide which packet carried what.
    """
    padded = apply_padding(dataset, strategy, seed)
    report = overhead(dataset, padded)
    expected = expected_overhead(dataset, strategy) if strategy.kind is PaddingKind.UNIFORM_TO_MAX else None
    opts = dict(seed=seed, k=k, jobs=jobs, os_n=os_n, language_n=language_n,
                instances_per_n=instances_per_n, action_instances=action_instances)
    result = CountermeasureResult(strategy, report, expected)
    for attack in attacks:
        before = _attack_scores(dataset, attack, None, opts)
        if before is None:
            log.info("skipping %s: dataset has nothing to attack", attack)
            continue
        after = _attack_scores(padded, attack, dataset, opts)
        metric = "mae" if attack == "length" else "accuracy"
        result.metrics[attack] = MetricPair(metric, before[0], after[0], chance=before[1], baseline_after=after[2])
        log.info("%s: %s %.3f -> %.3f", attack, metric, before[0], after[0])
    return result
