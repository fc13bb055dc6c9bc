"""Domain types shared by every module, plus trace preprocessing.

Constructors do not enforce the label/packet invariants: raw captures and
hand-edited files are allowed to be wrong, and :func:`validate` reports
what is wrong with them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Optional

from .errors import EmptyTrace

FORMAT_VERSION = 1


class Direction(str, enum.Enum):
    TO_SERVICE = "to"
    FROM_SERVICE = "from"

    def flip(self) -> "Direction":
        return Direction.FROM_SERVICE if self is Direction.TO_SERVICE else Direction.TO_SERVICE


class Service(str, enum.Enum):
    IMESSAGE = "iMessage"
    WHATSAPP = "WhatsApp"
    VIBER = "Viber"
    TELEGRAM = "Telegram"


class OS(str, enum.Enum):
    IOS = "iOS"
    OSX = "OSX"
    UNKNOWN = "Unknown"


class Action(str, enum.Enum):
    START = "Start"
    STOP = "Stop"
    TEXT = "Text"
    IMAGE = "Image"
    READ = "Read"
    CONTROL = "Control"


class Language(str, enum.Enum):
    CHINESE = "Chinese"
    ENGLISH = "English"
    FRENCH = "French"
    GERMAN = "German"
    RUSSIAN = "Russian"
    SPANISH = "Spanish"


# Fixed orders used for deterministic tie-breaking and report layout.
ACTION_ORDER = (Action.CONTROL, Action.READ, Action.START, Action.STOP, Action.IMAGE, Action.TEXT)
USER_ACTIONS = (Action.START, Action.STOP, Action.TEXT, Action.IMAGE, Action.READ)
LANGUAGE_ORDER = tuple(Language)


@dataclass(frozen=True)
class PacketRecord:
    timestamp: float
    direction: Direction
    payload_length: int
    stream_id: str
    seq_hint: Optional[int] = None


@dataclass(frozen=True)
class Label:
    service: Service
    os: OS
    action: Action
    language: Optional[Language] = None
    plaintext_chars: Optional[int] = None
    attachment_bytes: Optional[int] = None


@dataclass(frozen=True)
class LabeledTrace:
    packets: tuple[PacketRecord, ...]
    label: Label

    def __post_init__(self):
        if not isinstance(self.packets, tuple):
            object.__setattr__(self, "packets", tuple(self.packets))

    @property
    def direction(self) -> Optional[Direction]:
        """Direction of the first packet; traces are single-direction observations."""
        return self.packets[0].direction if self.packets else None


@dataclass(frozen=True)
class Dataset:
    traces: tuple[LabeledTrace, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.traces, tuple):
            object.__setattr__(self, "traces", tuple(self.traces))

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def with_traces(self, traces: Iterable[LabeledTrace]) -> "Dataset":
        return Dataset(tuple(traces), dict(self.metadata))


def merge_datasets(datasets: Iterable[Dataset], metadata: Optional[dict] = None) -> Dataset:
    datasets = list(datasets)
    traces = tuple(t for d in datasets for t in d.traces)
    if metadata is None:
        metadata = {"parts": [d.metadata for d in datasets]}
    return Dataset(traces, metadata)


def preprocess(trace: LabeledTrace) -> LabeledTrace:
    """Drop zero-payload packets and TCP retransmissions.

    Retransmissions are recognised by a repeated (stream_id, seq_hint,
    payload_length); packets without a seq_hint are never deduplicated.
    """
    seen: set[tuple[str, int, int]] = set()
    kept = []
    for p in trace.packets:
        if p.payload_length <= 0:
            continue
        if p.seq_hint is not None:
            key = (p.stream_id, p.seq_hint, p.payload_length)
            if key in seen:
                continue
            seen.add(key)
        kept.append(p)
    if not kept:
        raise EmptyTrace("every packet was removed by preprocessing")
    if len(kept) == len(trace.packets):
        return trace
    return replace(trace, packets=tuple(kept))


def preprocess_dataset(dataset: Dataset) -> Dataset:
    return dataset.with_traces(preprocess(t) for t in dataset.traces)


@dataclass(frozen=True)
class Violation:
    trace_index: int
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)


def _label_violations(label: Label) -> list[tuple[str, str]]:
    out = []
    is_text = label.action is Action.TEXT
    if is_text != (label.language is not None):
        out.append(("language", f"language must be set iff action is Text (action={label.action.value}, language={label.language})"))
    if is_text != (label.plaintext_chars is not None):
        out.append(("plaintext_chars", "plaintext_chars must be set iff action is Text"))
    if (label.action is Action.IMAGE) != (label.attachment_bytes is not None):
        out.append(("attachment_bytes", "attachment_bytes must be set iff action is Image"))
    if label.plaintext_chars is not None and label.plaintext_chars < 0:
        out.append(("plaintext_chars", "plaintext_chars must be non-negative"))
    if label.attachment_bytes is not None and label.attachment_bytes < 0:
        out.append(("attachment_bytes", "attachment_bytes must be non-negative"))
    return out


def _packet_violations(trace: LabeledTrace) -> list[tuple[str, str]]:
    out = []
    if not trace.packets:
        return [("non_empty", "trace has no packets")]
    prev = None
    for i, p in enumerate(trace.packets):
        if p.payload_length < 1:
            out.append(("payload_length", f"packet {i} has payload_length {p.payload_length}"))
        if p.timestamp < 0:
            out.append(("timestamp", f"packet {i} has negative timestamp"))
        if prev is not None and p.timestamp < prev:
            out.append(("timestamp_order", f"packet {i} timestamp decreases ({p.timestamp} < {prev})"))
        prev = p.timestamp
    return out


def validate(dataset: Dataset) -> ValidationReport:
    violations = []
    for idx, trace in enumerate(dataset.traces):
        for rule, msg in _label_violations(trace.label) + _packet_violations(trace):
            violations.append(Violation(idx, rule, msg))
    version = dataset.metadata.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        violations.append(Violation(-1, "format_version", f"metadata format_version {version} != {FORMAT_VERSION}"))
    return ValidationReport(tuple(violations))
