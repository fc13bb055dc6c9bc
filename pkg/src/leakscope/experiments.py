"""Task pipelines: OS fingerprinting, action, language and message-length attacks.

Every ``run_*`` function takes an optional ``reference`` dataset aligned
trace-for-trace and packet-for-packet with ``dataset``.  Packet classes
(which packets are control traffic, which carry the message) are then read
from the reference, so attacks on padded traffic keep the ground truth of
the unpadded capture.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .classifiers import CONTROL, DEFAULT_CLASS_ORDER, Fallback, NBKind
from .core import OS, Action, Dataset, LabeledTrace, Language, PacketRecord
from .errors import ShapeMismatch
from .evaluation import (
    DEFAULT_INSTANCES_PER_N,
    DEFAULT_N_VALUES,
    ClassifierSpec,
    ConfusionMatrix,
    RegressionReport,
    SweepResult,
    accuracy,
    evaluate_lookup,
    evaluate_regression,
    regression_pairs,
    sweep,
)

log = logging.getLogger(__name__)

OS_CLASSES = ("iOS:to", "iOS:from", "OSX:to", "OSX:from")
LANGUAGE_CLASSES = tuple(lang.value for lang in Language)


# --- control packets ----------------------------------------------------------

def metadata_control_lengths(metadata: Mapping) -> set[int]:
    out = {int(x) for x in metadata.get("control_packet_lengths", []) or []}
    for part in metadata.get("parts", []) or []:
        out |= metadata_control_lengths(part)
    return out


def identify_control_lengths(dataset: Dataset, min_classes: int = 3) -> set[int]:
    """Lengths seen under at least ``min_classes`` user actions within one (service, os, direction).

    Three rather than two, so a pair of actions that merely share a length
    (e.g. iOS read receipts and typing starts) is not mistaken for control.
    """
    seen: dict[tuple, set[Action]] = {}
    for t in dataset.traces:
        lab = t.label
        for p in t.packets:
            seen.setdefault((lab.service, lab.os, p.direction, p.payload_length), set()).add(lab.action)
    return {key[3] for key, actions in seen.items() if len(actions) >= min_classes}


def resolve_control_lengths(dataset: Dataset, explicit: Optional[Iterable[int]] = None) -> set[int]:
    if explicit is not None:
        return {int(x) for x in explicit}
    found = metadata_control_lengths(dataset.metadata)
    return found if found else identify_control_lengths(dataset)


# --- helpers ------------------------------------------------------------------

def _group_name(trace: LabeledTrace) -> str:
    lab = trace.label
    return f"{lab.service.value}/{lab.os.value}/{trace.direction.value}"


def _model_name(trace: LabeledTrace) -> str:
    return f"{trace.label.service.value}/{trace.label.os.value}"


def _aligned(dataset: Dataset, reference: Optional[Dataset],
             fn: Callable[[LabeledTrace, PacketRecord], Optional[str]]):
    """packet_class for ``dataset`` computed on the aligned packets of ``reference``."""
    if reference is None:
        return fn
    if len(reference.traces) != len(dataset.traces):
        raise ShapeMismatch("reference and dataset differ in trace count")
    table: dict[int, Optional[str]] = {}
    for rt, dt in zip(reference.traces, dataset.traces):
        if len(rt.packets) != len(dt.packets):
            raise ShapeMismatch("reference and dataset differ in packet count")
        for rp, dp in zip(rt.packets, dt.packets):
            table[id(dp)] = fn(rt, rp)
    return lambda t, p: table.get(id(p))


def _subset(dataset: Dataset, reference: Optional[Dataset], keep: Callable[[LabeledTrace], bool]):
    idx = [i for i, t in enumerate(dataset.traces) if keep(t)]
    sub = dataset.with_traces(dataset.traces[i] for i in idx)
    ref = reference.with_traces(reference.traces[i] for i in idx) if reference is not None else None
    return sub, ref


# --- OS fingerprinting ----------------------------------------------------------

def os_spec(packet_class=None) -> ClassifierSpec:
    def default(t: LabeledTrace, p: PacketRecord) -> Optional[str]:
        if t.label.os in (OS.IOS, OS.OSX):
            return f"{t.label.os.value}:{p.direction.value}"
        return None

    return ClassifierSpec("os_fingerprint", OS_CLASSES, packet_class or default, NBKind.BINOMIAL)


def same_os(true: str, pred: str) -> bool:
    return true.split(":")[0] == pred.split(":")[0]


def run_os_fingerprint(dataset: Dataset, n_values: Iterable[int] = DEFAULT_N_VALUES,
                       instances_per_n: int = DEFAULT_INSTANCES_PER_N, k: int = 10, seed: int = 0,
                       jobs: int = 1, reference: Optional[Dataset] = None, os_only: bool = False) -> SweepResult:
    """Binomial naive Bayes over the four (OS, direction) classes.

    With ``os_only`` a prediction counts as correct when the OS matches,
    whatever the direction.
    """
    sub, ref = _subset(dataset, reference, lambda t: t.label.os in (OS.IOS, OS.OSX))
    base = os_spec()
    spec = ClassifierSpec(base.name, base.classes, _aligned(sub, ref, base.packet_class), base.kind,
                          score=same_os if os_only else None)
    return sweep(sub, spec, n_values, instances_per_n, seed, k, jobs)


# --- user actions -----------------------------------------------------------------

@dataclass
class ActionResult:
    confusion: dict[str, ConfusionMatrix]

    @property
    def accuracies(self) -> dict[str, float]:
        return {g: accuracy(cm) for g, cm in self.confusion.items()}

    @property
    def macro_accuracy(self) -> float:
        return float(np.mean(list(self.accuracies.values())))

    def to_dict(self) -> dict:
        return {
            "macro_accuracy": self.macro_accuracy,
            "accuracy": self.accuracies,
            "confusion": {g: cm.to_dict() for g, cm in self.confusion.items()},
        }


def action_packet_class(control: set[int]):
    def fn(t: LabeledTrace, p: PacketRecord) -> Optional[str]:
        return CONTROL if p.payload_length in control else t.label.action.value

    return fn


def action_stratum(trace: LabeledTrace):
    """Folds balance actions; the message language plays no part in this task."""
    lab = trace.label
    return (lab.service.value, lab.os.value, lab.action.value, trace.direction.value if trace.direction else "")


def run_action_classify(dataset: Dataset, k: int = 10, instances: int = 1250, seed: int = 0,
                        control_lengths: Optional[Iterable[int]] = None,
                        fallback: Fallback = Fallback.NEAREST_LENGTH,
                        reference: Optional[Dataset] = None) -> ActionResult:
    """One lookup-table classifier per (service, OS, direction), as if the OS were already known."""
    control = resolve_control_lengths(reference if reference is not None else dataset, control_lengths)
    groups = sorted({_group_name(t) for t in dataset.traces})
    out = {}
    for g in groups:
        sub, ref = _subset(dataset, reference, lambda t, g=g: _group_name(t) == g)
        fn = _aligned(sub, ref, action_packet_class(control))
        out[g] = evaluate_lookup(sub, DEFAULT_CLASS_ORDER, fn, instances, k, seed, fallback, action_stratum)
    return ActionResult(out)


# --- language -----------------------------------------------------------------------

def language_packet_class(control: set[int]):
    def fn(t: LabeledTrace, p: PacketRecord) -> Optional[str]:
        if t.label.language is None or p.payload_length in control:
            return None
        return t.label.language.value

    return fn


def run_language_classify(dataset: Dataset, n_values: Iterable[int] = DEFAULT_N_VALUES,
                          instances_per_n: int = DEFAULT_INSTANCES_PER_N, k: int = 10, seed: int = 0,
                          jobs: int = 1, control_lengths: Optional[Iterable[int]] = None,
                          reference: Optional[Dataset] = None) -> dict[str, SweepResult]:
    """Multinomial naive Bayes over message packets, one task per (service, OS).

    Both directions are pooled; the direction stays part of every feature key.
    """
    control = resolve_control_lengths(reference if reference is not None else dataset, control_lengths)
    n_values = list(n_values)
    text = [t for t in dataset.traces if t.label.action is Action.TEXT]
    groups = sorted({_model_name(t) for t in text})
    out = {}
    for g in groups:
        sub, ref = _subset(dataset, reference,
                           lambda t, g=g: t.label.action is Action.TEXT and _model_name(t) == g)
        present = {t.label.language.value for t in sub.traces if t.label.language is not None}
        classes = tuple(c for c in LANGUAGE_CLASSES if c in present)
        spec = ClassifierSpec(f"language:{g}", classes, _aligned(sub, ref, language_packet_class(control)),
                              NBKind.MULTINOMIAL)
        out[g] = sweep(sub, spec, n_values, instances_per_n, seed, k, jobs)
    return out


# --- message length -----------------------------------------------------------------

def length_group(trace: LabeledTrace) -> Optional[str]:
    lab = trace.label
    if lab.action is Action.TEXT and lab.language is not None:
        return f"{lab.language.value}/{_group_name(trace)}"
    if lab.action is Action.IMAGE:
        return f"attachment/{_group_name(trace)}"
    return None


def run_length_regress(dataset: Dataset, k: int = 10, seed: int = 0,
                       control_lengths: Optional[Iterable[int]] = None,
                       reference: Optional[Dataset] = None) -> RegressionReport:
    """OLS of message length on payload length per (language, service, OS, direction).

    Image groups whose payload never varies (in-band notifications rather
    than the attachment transfer itself) carry no size signal and are
    skipped.
    """
    control = resolve_control_lengths(reference if reference is not None else dataset, control_lengths)
    source = reference if reference is not None else dataset
    pairs = regression_pairs(source, length_group, control)
    for key in [k_ for k_ in pairs if k_.startswith("attachment/")]:
        if len({x for x, _ in pairs[key]}) < 2:
            log.info("skipping %s: constant payload length", key)
            del pairs[key]
    if reference is not None:
        aligned = _aligned_regression_pairs(dataset, reference, control)
        pairs = {key: aligned[key] for key in pairs}
    return evaluate_regression(pairs, k=k, seed=seed)


def _aligned_regression_pairs(dataset: Dataset, reference: Dataset, control: set[int]):
    if len(reference.traces) != len(dataset.traces):
        raise ShapeMismatch("reference and dataset differ in trace count")
    out: dict[str, list] = {}
    for rt, dt in zip(reference.traces, dataset.traces):
        target = rt.label.plaintext_chars if rt.label.plaintext_chars is not None else rt.label.attachment_bytes
        key = length_group(rt)
        if target is None or key is None:
            continue
        content = [(rp.payload_length, dp.payload_length) for rp, dp in zip(rt.packets, dt.packets)
                   if rp.payload_length not in control]
        if content:
            out.setdefault(key, []).append((max(content)[1], target))
    return out
