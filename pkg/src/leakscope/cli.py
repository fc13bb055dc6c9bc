"""Command-line entry point: generate, ingest, run, report.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import experiments as ex
from .core import FORMAT_VERSION, Dataset, merge_datasets, preprocess_dataset
from .countermeasures import ATTACKS, PaddingKind, PaddingStrategy, apply_padding, evaluate_countermeasure
from .errors import ConfigError, DataError
from .evaluation import DEFAULT_INSTANCES_PER_N, DEFAULT_N_VALUES, AccuracyCurve, ConfusionMatrix, CurvePoint
from .ingest import CaptureConfig, PcapStats, atomic_write_text, label_from_dict, parse_pcap, read_dataset, \
    records_to_dataset, write_dataset
from .simulator import PRESETS, ScenarioConfig, generate_many

log = logging.getLogger("leakscope")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

TASKS = ("os_fingerprint", "action_classify", "language_classify", "length_regress", "countermeasure_eval")
LANGUAGE_N_VALUES = (1, 5, 10, 25, 50, 75, 100)
DATASET_FILE = "dataset.jsonl"

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


# --- configuration -----------------------------------------------------------------

def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _int(value, name: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}")
    return value


@dataclass
class GenerateSpec:
    """A named preset or an explicit list of scenarios."""

    preset: Optional[str] = None
    scenarios: Optional[list] = None
    samples_per_class: Optional[int] = None
    seed: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "GenerateSpec":
        _check_keys(d, {"preset", "scenarios", "samples_per_class", "seed"}, "generate")
        spec = cls(d.get("preset"), d.get("scenarios"), d.get("samples_per_class"), d.get("seed"))
        if (spec.preset is None) == (spec.scenarios is None):
            raise ConfigError("generate needs exactly one of 'preset' or 'scenarios'")
        if spec.preset is not None and spec.preset not in PRESETS:
            raise ConfigError(f"unknown preset {spec.preset!r}; choose from {sorted(PRESETS)}")
        if spec.scenarios is not None and not isinstance(spec.scenarios, list):
            raise ConfigError("scenarios must be a list")
        if spec.samples_per_class is not None:
            _int(spec.samples_per_class, "samples_per_class", 1)
        if spec.seed is not None:
            _int(spec.seed, "generate.seed")
        spec.configs()  # validate now rather than mid-run
        return spec

    def configs(self, seed: int = 0) -> list[ScenarioConfig]:
        seed = self.seed if self.seed is not None else seed
        try:
            if self.preset is not None:
                cfgs = PRESETS[self.preset](seed)
            else:
                cfgs = [dataclasses.replace(ScenarioConfig.from_dict(s), rng_seed=seed + i)
                        if "rng_seed" not in s else ScenarioConfig.from_dict(s)
                        for i, s in enumerate(self.scenarios)]
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"bad scenario: {e}") from e
        if self.samples_per_class is not None:
            cfgs = [dataclasses.replace(c, samples_per_class=self.samples_per_class) for c in cfgs]
        return cfgs

    def to_dict(self, seed: int) -> dict:
        return {"scenarios": [c.to_dict() for c in self.configs(seed)]}


@dataclass
class ExperimentConfig:
    task: str
    source: str  # "generate" | "dataset" | "pcap"
    generate: Optional[GenerateSpec] = None
    path: Optional[str] = None
    capture: Optional[CaptureConfig] = None
    label: Optional[dict] = None
    seed: int = 0
    k: int = 10
    n_values: Optional[tuple[int, ...]] = None
    instances_per_n: int = DEFAULT_INSTANCES_PER_N
    instances: int = 1250
    control_lengths: Optional[tuple[int, ...]] = None
    attacks: tuple[str, ...] = ATTACKS
    os_n: int = 5
    language_n: int = 100
    padding: PaddingStrategy = field(default_factory=PaddingStrategy.none)
    out: str = "."
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "ExperimentConfig":
        _check_keys(d, {"task", "input", "seed", "evaluation", "padding", "out"}, "config")
        task = d.get("task")
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        inp = d.get("input")
        _check_keys(inp, {"generate", "dataset", "pcap", "capture", "label"}, "input")
        sources = [s for s in ("generate", "dataset", "pcap") if s in inp]
        if len(sources) != 1:
            raise ConfigError("input needs exactly one of 'generate', 'dataset' or 'pcap'")
        cfg = cls(task=task, source=sources[0], base_dir=base_dir)
        if cfg.source == "generate":
            cfg.generate = GenerateSpec.from_dict(inp["generate"])
        else:
            if not isinstance(inp[cfg.source], str):
                raise ConfigError(f"input.{cfg.source} must be a path")
            cfg.path = inp[cfg.source]
        if cfg.source == "pcap":
            if "label" not in inp:
                raise ConfigError("pcap input needs a 'label'")
            cfg.capture, cfg.label = _capture_and_label(inp)
        elif "capture" in inp or "label" in inp:
            raise ConfigError("'capture' and 'label' only apply to pcap input")
        cfg.seed = _int(d.get("seed", 0), "seed")
        ev = d.get("evaluation", {})
        _check_keys(ev, {"k", "n_values", "instances_per_n", "instances", "control_lengths",
                         "attacks", "os_n", "language_n"}, "evaluation")
        cfg.k = _int(ev.get("k", 10), "k", 2)
        if "n_values" in ev:
            nv = ev["n_values"]
            if not isinstance(nv, list) or not nv:
                raise ConfigError("n_values must be a non-empty list")
            cfg.n_values = tuple(sorted({_int(n, "n_values", 1) for n in nv}))
        cfg.instances_per_n = _int(ev.get("instances_per_n", DEFAULT_INSTANCES_PER_N), "instances_per_n", 1)
        cfg.instances = _int(ev.get("instances", 1250), "instances", 1)
        if ev.get("control_lengths") is not None:
            cfg.control_lengths = tuple(sorted({_int(n, "control_lengths", 1) for n in ev["control_lengths"]}))
        attacks = ev.get("attacks", list(ATTACKS))
        if not isinstance(attacks, list) or not set(attacks) <= set(ATTACKS) or not attacks:
            raise ConfigError(f"attacks must be a non-empty subset of {list(ATTACKS)}")
        cfg.attacks = tuple(a for a in ATTACKS if a in attacks)
        cfg.os_n = _int(ev.get("os_n", 5), "os_n", 1)
        cfg.language_n = _int(ev.get("language_n", 100), "language_n", 1)
        if "padding" in d:
            cfg.padding = PaddingStrategy.from_dict(d["padding"])
        elif task == "countermeasure_eval":
            cfg.padding = PaddingStrategy.uniform_to_max()
        cfg.out = d.get("out", ".")
        if not isinstance(cfg.out, str):
            raise ConfigError("out must be a path")
        return cfg

    def resolved_n_values(self) -> tuple[int, ...]:
        if self.n_values is not None:
            return self.n_values
        return LANGUAGE_N_VALUES if self.task == "language_classify" else DEFAULT_N_VALUES

    def to_dict(self) -> dict:
        inp: dict[str, Any]
        if self.source == "generate":
            inp = {"generate": self.generate.to_dict(self.seed)}
        else:
            inp = {self.source: self.path}
            if self.source == "pcap":
                inp["capture"] = self.capture.to_dict()
                inp["label"] = self.label
        return {
            "task": self.task,
            "input": inp,
            "seed": self.seed,
            "evaluation": {
                "k": self.k,
                "n_values": list(self.resolved_n_values()),
                "instances_per_n": self.instances_per_n,
                "instances": self.instances,
                "control_lengths": list(self.control_lengths) if self.control_lengths is not None else None,
                "attacks": list(self.attacks),
                "os_n": self.os_n,
                "language_n": self.language_n,
            },
            "padding": self.padding.to_dict(),
        }


def _capture_and_label(d: dict) -> tuple[CaptureConfig, dict]:
    try:
        capture = CaptureConfig.from_dict(d.get("capture", {}))
        label = d["label"]
        label_from_dict(label)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ConfigError(f"bad capture or label: {e}") from e
    return capture, label


def load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


# --- data loading -------------------------------------------------------------------

def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def ingest_files(paths: Sequence[Path], capture: CaptureConfig, label: dict) -> Dataset:
    lab = label_from_dict(label)
    parts = []
    for path in paths:
        stats = PcapStats()
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError as e:
            raise DataError(f"pcap not found: {path}") from e
        records = parse_pcap(data, capture, stats)
        log.info("%s: %s", path, dataclasses.asdict(stats))
        parts.append(records_to_dataset(records, lab, {"source": Path(path).name}))
    meta = {"format_version": FORMAT_VERSION, "capture": capture.to_dict(),
            "sources": [p.metadata["source"] for p in parts]}
    return preprocess_dataset(merge_datasets(parts, meta))


def load_input(cfg: ExperimentConfig) -> Dataset:
    if cfg.source == "generate":
        return generate_many(cfg.generate.configs(cfg.seed))
    path = _resolve(cfg.base_dir, cfg.path)
    if cfg.source == "dataset":
        try:
            return read_dataset(path)
        except FileNotFoundError as e:
            raise DataError(f"dataset not found: {path}") from e
    return ingest_files([path], cfg.capture, cfg.label)


# --- task dispatch ----------------------------------------------------------------------

def _macro_curve(results: dict) -> AccuracyCurve:
    ns = sorted(set.intersection(*[{p.n_packets for p in r.curve.points} for r in results.values()]))
    points = []
    for n in ns:
        cms = [r.confusion[n] for r in results.values()]
        acc = float(np.mean([r.curve.at(n) for r in results.values()]))
        points.append(CurvePoint(n, acc, sum(cm.total for cm in cms)))
    return AccuracyCurve(tuple(points))


def run_task(cfg: ExperimentConfig, dataset: Dataset, jobs: int = 1) -> tuple[dict, Optional[AccuracyCurve]]:
    """Result dict and, for sweep tasks, the curve to export as CSV.

    Outside countermeasure_eval a non-trivial padding strategy is applied
    first and the attack runs on the padded traffic.
    """
    ref = None
    if cfg.task != "countermeasure_eval" and cfg.padding.kind is not PaddingKind.NONE:
        dataset, ref = apply_padding(dataset, cfg.padding, cfg.seed), dataset
    if cfg.task == "os_fingerprint":
        res = ex.run_os_fingerprint(dataset, cfg.resolved_n_values(), cfg.instances_per_n, cfg.k, cfg.seed, jobs,
                                    reference=ref)
        return res.to_dict(), res.curve
    if cfg.task == "action_classify":
        res = ex.run_action_classify(dataset, cfg.k, cfg.instances, cfg.seed, cfg.control_lengths, reference=ref)
        return res.to_dict(), None
    if cfg.task == "language_classify":
        res = ex.run_language_classify(dataset, cfg.resolved_n_values(), cfg.instances_per_n, cfg.k, cfg.seed,
                                       jobs, cfg.control_lengths, reference=ref)
        if not res:
            raise DataError("dataset has no labelled text traces")
        curve = _macro_curve(res)
        return {"macro_curve": curve.to_list(), "groups": {g: r.to_dict() for g, r in res.items()}}, curve
    if cfg.task == "length_regress":
        return ex.run_length_regress(dataset, cfg.k, cfg.seed, cfg.control_lengths, reference=ref).to_dict(), None
    if cfg.task == "countermeasure_eval":
        res = evaluate_countermeasure(dataset, cfg.padding, cfg.attacks, cfg.seed, cfg.k, jobs,
                                      os_n=cfg.os_n, language_n=cfg.language_n,
                                      instances_per_n=cfg.instances_per_n, action_instances=cfg.instances)
        return res.to_dict(), None
    raise ConfigError(f"unknown task {cfg.task!r}")


def dumps_report(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(cfg: ExperimentConfig, result: dict, curve: Optional[AccuracyCurve], out_dir: Path) -> Path:
    report = {"format_version": FORMAT_VERSION, "task": cfg.task, "seed": cfg.seed,
              "config": cfg.to_dict(), "result": result}
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{cfg.task}_report.json"
    atomic_write_text(path, dumps_report(report))
    if curve is not None:
        atomic_write_text(out_dir / f"{cfg.task}_curve.csv", curve.to_csv())
    return path


# --- report rendering ----------------------------------------------------------------------

def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in header]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.3f}"
    return "" if x is None else str(x)


def render_confusion(cm: ConfusionMatrix) -> str:
    rates = cm.rates()
    rows = [[c] + [float(v) for v in rates[i]] for i, c in enumerate(cm.classes)]
    return _table(["true \\ pred", *cm.classes], rows)


def render_curve(points: list) -> str:
    return _table(["n", "accuracy", "count"], [[p["n"], p["accuracy"], p["count"]] for p in points])


def _render_sweep(d: dict, title: str) -> list[str]:
    out = [f"== {title}: accuracy by n", render_curve(d["curve"])]
    if d["confusion"]:
        n = max(d["confusion"], key=int)
        out += [f"== {title}: confusion at n={n}", render_confusion(ConfusionMatrix.from_dict(d["confusion"][n]))]
    return out


def render_report(report: dict) -> str:
    task, res = report.get("task"), report.get("result", {})
    out = [f"task: {task}  seed: {report.get('seed')}"]
    if task == "os_fingerprint":
        out += _render_sweep(res, "os")
    elif task == "action_classify":
        out.append(f"macro accuracy: {res['macro_accuracy']:.3f}")
        for g, cm in sorted(res["confusion"].items()):
            out += [f"== {g} (accuracy {res['accuracy'][g]:.3f})", render_confusion(ConfusionMatrix.from_dict(cm))]
    elif task == "language_classify":
        out += ["== macro accuracy by n", render_curve(res["macro_curve"])]
        for g, r in sorted(res["groups"].items()):
            out += _render_sweep(r, g)
    elif task == "length_regress":
        rows = [[g, e["mae"], e["baseline_mae"], e["count"], e["slope"], e["intercept"]]
                for g, e in sorted(res["groups"].items())]
        out += [f"overall MAE: {res['overall_mae']:.3f}",
                _table(["group", "mae", "baseline", "count", "slope", "intercept"], rows)]
    elif task == "countermeasure_eval":
        ov = res["overhead"]
        out.append(f"padding: {json.dumps(res['padding'], sort_keys=True)}")
        out.append(f"overhead: {ov['mean_added_bytes']:.1f} bytes/message ({ov['percent']:.1f}%)")
        out.append(_table(["group", "bytes/message", "percent"],
                          [[g, v["mean_added_bytes"], v["percent"]] for g, v in ov["groups"].items()]))
        rows = [[a, m["metric"], m["before"], m["after"], m.get("chance"), m.get("baseline_after")]
                for a, m in res["attacks"].items()]
        out.append(_table(["attack", "metric", "before", "after", "chance", "baseline"], rows))
    else:
        raise DataError(f"not a report file (task {task!r})")
    return "\n".join(out) + "\n"


def report_csvs(report: dict) -> dict[str, str]:
    """Confusion matrices of a report as CSV text, keyed by file name."""
    res, task = report.get("result", {}), report.get("task")
    mats: dict[str, dict] = {}
    if task == "os_fingerprint" and res.get("confusion"):
        n = max(res["confusion"], key=int)
        mats[f"{task}_confusion_n{n}"] = res["confusion"][n]
    elif task == "action_classify":
        mats.update({f"{task}_confusion_{g.replace('/', '_')}": cm for g, cm in res["confusion"].items()})
    elif task == "language_classify":
        for g, r in res["groups"].items():
            n = max(r["confusion"], key=int)
            mats[f"{task}_confusion_{g.replace('/', '_')}_n{n}"] = r["confusion"][n]
    out = {}
    for name, d in mats.items():
        cm = ConfusionMatrix.from_dict(d)
        lines = [",".join(["true"] + list(cm.classes))]
        lines += [",".join([c] + [str(int(v)) for v in cm.counts[i]]) for i, c in enumerate(cm.classes)]
        out[f"{name}.csv"] = "\n".join(lines) + "\n"
    return out


# --- commands ----------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    d = load_json(args.config)
    spec = GenerateSpec.from_dict(d if d else {"preset": "imessage"})
    seed = args.seed if args.seed is not None else (spec.seed if spec.seed is not None else 0)
    spec.seed = None
    dataset = generate_many(spec.configs(seed))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out / DATASET_FILE)
    print(out / DATASET_FILE)
    return EXIT_OK


def cmd_ingest(args) -> int:
    d = load_json(args.config)
    _check_keys(d, {"capture", "label"}, "ingest config")
    if "label" not in d:
        raise ConfigError("ingest config needs a 'label'")
    capture, label = _capture_and_label(d)
    dataset = ingest_files([Path(p) for p in args.pcap], capture, label)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(dataset, out / DATASET_FILE)
    print(out / DATASET_FILE)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.config is None:
        raise ConfigError("run needs --config")
    d = load_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    base = Path(args.config).resolve().parent
    cfg = ExperimentConfig.from_dict(d, base_dir=base)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    dataset = load_input(cfg)
    log.info("running %s on %d traces (seed %d)", cfg.task, len(dataset), cfg.seed)
    result, curve = run_task(cfg, dataset, args.jobs)
    out_dir = Path(args.out) if args.out is not None else _resolve(base, cfg.out)
    path = write_report(cfg, result, curve, out_dir)
    log.info("wrote %s", path)
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        with open(args.report, encoding="utf-8") as fh:
            report = json.load(fh)
    except FileNotFoundError as e:
        raise DataError(f"report not found: {args.report}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"report {args.report} is not valid JSON: {e}") from e
    if not isinstance(report, dict):
        raise DataError("report must be a JSON object")
    try:
        sys.stdout.write(render_report(report))
        csvs = report_csvs(report)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed report: {e}") from e
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in csvs.items():
            atomic_write_text(out / name, text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for sweeps (default 1)")

    p = _Parser(prog="leakscope", description="Packet-size side-channel analysis toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", parents=[common], help="simulate a labelled dataset")
    g.set_defaults(fn=cmd_generate)
    i = sub.add_parser("ingest", parents=[common], help="convert pcap captures to a dataset")
    i.add_argument("pcap", nargs="+", help="capture files")
    i.set_defaults(fn=cmd_ingest)
    r = sub.add_parser("run", parents=[common], help="run an experiment and write its report")
    r.set_defaults(fn=cmd_run)
    rep = sub.add_parser("report", parents=[common], help="render a report file as text tables")
    rep.add_argument("report", help="a <task>_report.json file")
    rep.set_defaults(fn=cmd_report)
    return p


def configure_logging() -> None:
    raw = os.environ.get("LEAKSCOPE_LOG", "warn").strip().lower()
    level = _LOG_LEVELS.get(raw)
    logging.basicConfig(level=level or logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level is None:
        log.warning("ignoring unknown LEAKSCOPE_LOG value %r", raw)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort boundary
        log.debug("internal failure", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
