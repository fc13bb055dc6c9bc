"""Synthetic labeled traces for iMessage, WhatsApp, Viber and Telegram.

Payload sizes follow a deterministic size model per (service, OS): a fixed
overhead per (direction, action), plus the compressed encoded text rounded
up to the cipher block, minus a fixed number of bytes stripped by the
provider on delivery.  The absolute byte values shipped in
:func:`builtin_models` are synthetic stand-ins chosen to reproduce the
*structure* of real traffic (disjoint OS bands, one length per action,
stair steps), not measured values.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    FORMAT_VERSION,
    OS,
    Action,
    Dataset,
    Direction,
    Label,
    LabeledTrace,
    Language,
    PacketRecord,
    Service,
    USER_ACTIONS,
    merge_datasets,
)
from .errors import ConfigError, Overflow

TO = Direction.TO_SERVICE
FROM = Direction.FROM_SERVICE


class CharsetProfile(enum.Enum):
    ASCII = ("ASCII", 1)
    UNICODE2 = ("Unicode2", 2)
    UNICODE3 = ("Unicode3", 3)

    def __init__(self, label: str, bytes_per_char: int):
        self.label = label
        self.bytes_per_char = bytes_per_char

    @classmethod
    def from_label(cls, label: str) -> "CharsetProfile":
        for c in cls:
            if c.label == label:
                return c
        raise ValueError(f"unknown charset {label!r}")


@dataclass(frozen=True)
class SentenceLength:
    """Log-normal character count, rounded and clipped to [minimum, maximum].

    A small ``tail_fraction`` of messages come from a second, much longer
    log-normal, so a corpus spans short chat lines up to a few hundred
    characters.
    """

    median: float
    sigma: float
    minimum: int = 2
    maximum: int = 400
    tail_fraction: float = 0.0
    tail_median: float = 250.0
    tail_sigma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tail_fraction <= 1.0:
            raise ConfigError("tail_fraction must be in [0, 1]")
        if self.median <= 0 or self.tail_median <= 0 or self.minimum > self.maximum:
            raise ConfigError("invalid sentence length parameters")

    def sample(self, rng: np.random.Generator) -> int:
        if self.tail_fraction > 0 and rng.random() < self.tail_fraction:
            x = rng.lognormal(math.log(self.tail_median), self.tail_sigma)
        else:
            x = rng.lognormal(math.log(self.median), self.sigma)
        return int(min(max(round(x), self.minimum), self.maximum))


@dataclass(frozen=True)
class LanguageProfile:
    language: Language
    charset_mix: Mapping[CharsetProfile, float]
    sentence_length: SentenceLength

    def __post_init__(self):
        probs = list(self.charset_mix.values())
        if any(p < 0 or p > 1 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"{self.language.value}: charset mix must be probabilities summing to 1")

    @property
    def single_charset(self) -> bool:
        return sum(1 for p in self.charset_mix.values() if p > 0) == 1

    @property
    def ascii_run_fraction(self) -> float:
        """Probability that an individual character is ASCII."""
        return float(self.charset_mix.get(CharsetProfile.ASCII, 0.0))

    def mean_bytes_per_char(self) -> float:
        return sum(c.bytes_per_char * p for c, p in self.charset_mix.items())


# share of messages drawn from the long-message tail
LONG_TAIL = 0.02


def _mixed(language: Language, ascii_fraction: float, median: float, sigma: float) -> LanguageProfile:
    return LanguageProfile(
        language,
        {CharsetProfile.ASCII: ascii_fraction, CharsetProfile.UNICODE2: 1.0 - ascii_fraction},
        SentenceLength(median, sigma, tail_fraction=LONG_TAIL),
    )


def builtin_languages() -> dict[Language, LanguageProfile]:
    """Synthetic language profiles.

    The six languages sit in three well separated length bands (English and
    Spanish, French and German, Russian and Chinese); within a band the two
    languages differ by a few bytes, which fine quantization resolves and
    coarse quantization blurs.
    """
    return {
        Language.CHINESE: LanguageProfile(Language.CHINESE, {CharsetProfile.UNICODE3: 1.0}, SentenceLength(50, 0.12, tail_fraction=LONG_TAIL)),
        Language.ENGLISH: LanguageProfile(Language.ENGLISH, {CharsetProfile.ASCII: 1.0}, SentenceLength(36, 0.17, tail_fraction=LONG_TAIL)),
        Language.FRENCH: _mixed(Language.FRENCH, 0.96, 84, 0.1),
        Language.GERMAN: _mixed(Language.GERMAN, 0.98, 92, 0.1),
        Language.RUSSIAN: LanguageProfile(Language.RUSSIAN, {CharsetProfile.UNICODE2: 1.0}, SentenceLength(70, 0.12, tail_fraction=LONG_TAIL)),
        Language.SPANISH: _mixed(Language.SPANISH, 0.97, 40.5, 0.17),
    }


def encoded_length(chars: int, profile: LanguageProfile, rng: Optional[np.random.Generator] = None) -> int:
    """Byte length of a ``chars``-character message under the language's charset mix."""
    if chars < 1:
        raise ValueError("chars must be >= 1")
    if profile.single_charset:
        (charset,) = [c for c, p in profile.charset_mix.items() if p > 0]
        return chars * charset.bytes_per_char
    if rng is None:
        raise ValueError("mixed-charset languages need an rng")
    charsets = list(profile.charset_mix)
    probs = np.array([profile.charset_mix[c] for c in charsets], dtype=float)
    counts = rng.multinomial(chars, probs / probs.sum())
    return int(sum(int(n) * c.bytes_per_char for n, c in zip(counts, charsets)))


@dataclass(frozen=True)
class SizeModel:
    name: str
    service: Service
    os: OS
    # Keyed by (direction, action); value is the size before the direction delta.
    base_overhead: Mapping[tuple[Direction, Action], int]
    block_size: int
    compression_factor: float
    direction_delta: int
    max_payload: int
    control_lengths: tuple[int, ...] = ()
    synthetic: bool = True

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not 0 < self.compression_factor <= 1:
            raise ConfigError("compression_factor must be in (0, 1]")

    def actions(self) -> set[Action]:
        return {a for (_, a) in self.base_overhead}


def payload_length(model: SizeModel, direction: Direction, action: Action, encoded: int) -> int:
    if encoded < 0:
        raise ValueError("encoded length must be >= 0")
    try:
        base = model.base_overhead[(direction, action)]
    except KeyError:
        raise ConfigError(f"model {model.name} has no overhead for {direction.value}/{action.value}") from None
    # Rounded before ceil so e.g. 0.6 * 80 lands exactly on a block boundary.
    blocks = math.ceil(round(model.compression_factor * encoded / model.block_size, 9))
    size = base + model.block_size * blocks
    if direction is FROM:
        size -= model.direction_delta
    if size > model.max_payload:
        raise Overflow(f"{model.name}: payload {size} exceeds max_payload {model.max_payload}")
    return size


def _overheads(to: Mapping[Action, int], frm: Optional[Mapping[Action, int]] = None) -> dict:
    frm = {**to, **(frm or {})}
    out = {(TO, a): v for a, v in to.items()}
    out.update({(FROM, a): v for a, v in frm.items()})
    return out


def builtin_models() -> dict[str, SizeModel]:
    """The six shipped size models.

    All byte values are synthetic.  They are picked so that the iOS and OSX
    (length, direction) supports are disjoint (text sizes sit on different
    residues mod 16), every action has its own length per direction, and
    iOS Read and Start share one to-service length.
    """
    ios = SizeModel(
        name="imessage-ios",
        service=Service.IMESSAGE,
        os=OS.IOS,
        base_overhead=_overheads(
            {Action.TEXT: 180, Action.START: 139, Action.READ: 139, Action.STOP: 125, Action.IMAGE: 270},
            {Action.READ: 155},
        ),
        block_size=16,
        compression_factor=0.3,
        direction_delta=64,
        max_payload=1500,
        control_lengths=(37, 53),
    )
    osx = SizeModel(
        name="imessage-osx",
        service=Service.IMESSAGE,
        os=OS.OSX,
        base_overhead=_overheads(
            {Action.TEXT: 232, Action.START: 167, Action.READ: 183, Action.STOP: 150, Action.IMAGE: 302}
        ),
        block_size=16,
        compression_factor=0.5,
        direction_delta=112,
        max_payload=1500,
        control_lengths=(41, 57),
    )
    whatsapp = SizeModel(
        name="whatsapp",
        service=Service.WHATSAPP,
        os=OS.UNKNOWN,
        base_overhead=_overheads(
            {Action.TEXT: 90, Action.START: 41, Action.STOP: 43, Action.READ: 50, Action.IMAGE: 71}
        ),
        block_size=1,
        compression_factor=1.0,
        direction_delta=0,
        max_payload=1500,
        control_lengths=(31,),
    )
    viber = SizeModel(
        name="viber",
        service=Service.VIBER,
        os=OS.UNKNOWN,
        base_overhead=_overheads(
            {Action.TEXT: 120, Action.START: 70, Action.STOP: 74, Action.READ: 82, Action.IMAGE: 101}
        ),
        block_size=1,
        compression_factor=1.0,
        direction_delta=0,
        max_payload=1500,
        control_lengths=(52,),
    )
    telegram = SizeModel(
        name="telegram",
        service=Service.TELEGRAM,
        os=OS.UNKNOWN,
        base_overhead=_overheads(
            {Action.TEXT: 88, Action.START: 73, Action.STOP: 75, Action.READ: 61, Action.IMAGE: 250}
        ),
        block_size=16,
        compression_factor=1.0,
        direction_delta=0,
        max_payload=1500,
        control_lengths=(45,),
    )
    # Attachment uploads/downloads to cloud storage: payload grows with the file.
    attachment = SizeModel(
        name="attachment",
        service=Service.IMESSAGE,
        os=OS.UNKNOWN,
        base_overhead=_overheads({Action.IMAGE: 611}),
        block_size=16,
        compression_factor=1.0,
        direction_delta=0,
        max_payload=1 << 20,
    )
    return {m.name: m for m in (ios, osx, whatsapp, viber, telegram, attachment)}


IMAGE_SIDES = (64, 128, 256)


def png_surrogate_bytes(side: int, rng: np.random.Generator) -> int:
    """File size of a random-noise RGB PNG: raw pixels, filter bytes, headers, deflate jitter."""
    return 3 * side * side + side + 67 + int(rng.integers(0, 64))


@dataclass(frozen=True)
class ScenarioConfig:
    model: str
    action_mix: Mapping[Action, float] = field(default_factory=lambda: {a: 1 / 5 for a in USER_ACTIONS})
    language_mix: Mapping[Language, float] = field(default_factory=lambda: {lang: 1 / 6 for lang in Language})
    samples_per_class: int = 250
    control_packet_lengths: Optional[tuple[int, ...]] = None
    control_probability: float = 0.5
    directions: tuple[Direction, ...] = (TO, FROM)
    rng_seed: int = 0

    def __post_init__(self):
        for name, mix in (("action_mix", self.action_mix), ("language_mix", self.language_mix)):
            vals = list(mix.values())
            if not vals or any(v < 0 for v in vals) or not math.isclose(sum(vals), 1.0, abs_tol=1e-9):
                raise ConfigError(f"{name} must be probabilities summing to 1")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if not 0 <= self.control_probability <= 1:
            raise ConfigError("control_probability must be in [0, 1]")

    def class_counts(self) -> dict[Action, int]:
        """Traces per (action, direction): samples_per_class scaled by the mix."""
        support = [a for a in USER_ACTIONS if self.action_mix.get(a, 0) > 0]
        return {a: int(round(self.samples_per_class * len(support) * self.action_mix[a])) for a in support}

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "action_mix": {a.value: p for a, p in self.action_mix.items()},
            "language_mix": {lang.value: p for lang, p in self.language_mix.items()},
            "samples_per_class": self.samples_per_class,
            "control_probability": self.control_probability,
            "directions": [d.value for d in self.directions],
            "rng_seed": self.rng_seed,
        }
        if self.control_packet_lengths is not None:
            d["control_packet_lengths"] = list(self.control_packet_lengths)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        known = {"model", "service", "os", "action_mix", "language_mix", "samples_per_class",
                 "control_packet_lengths", "control_probability", "directions", "rng_seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        model = d.get("model")
        if model is None:
            if "service" not in d:
                raise ConfigError("scenario needs 'model' or 'service'")
            model = model_name_for(Service(d["service"]), OS(d.get("os", "Unknown")))
        kwargs: dict = {"model": model}
        try:
            if "action_mix" in d:
                kwargs["action_mix"] = {Action(k): float(v) for k, v in d["action_mix"].items()}
            if "language_mix" in d:
                kwargs["language_mix"] = {Language(k): float(v) for k, v in d["language_mix"].items()}
            if "directions" in d:
                kwargs["directions"] = tuple(Direction(x) for x in d["directions"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if "samples_per_class" in d:
            kwargs["samples_per_class"] = int(d["samples_per_class"])
        if d.get("control_packet_lengths") is not None:
            kwargs["control_packet_lengths"] = tuple(int(x) for x in d["control_packet_lengths"])
        if "control_probability" in d:
            kwargs["control_probability"] = float(d["control_probability"])
        if "rng_seed" in d:
            kwargs["rng_seed"] = int(d["rng_seed"])
        return cls(**kwargs)


def model_name_for(service: Service, os_: OS) -> str:
    if service is Service.IMESSAGE:
        if os_ is OS.IOS:
            return "imessage-ios"
        if os_ is OS.OSX:
            return "imessage-osx"
        raise ConfigError("iMessage scenarios need os iOS or OSX")
    return service.value.lower()


def _content_packets(model, direction, action, rng, languages, config):
    """Return (label fields, list of content payload lengths) for one user action."""
    if model.name == "attachment":
        side = IMAGE_SIDES[int(rng.integers(len(IMAGE_SIDES)))]
        size = png_surrogate_bytes(side, rng)
        return {"attachment_bytes": size}, [payload_length(model, direction, action, size)]
    if action is Action.TEXT:
        langs = list(config.language_mix)
        probs = np.array([config.language_mix[x] for x in langs], dtype=float)
        lang = langs[int(rng.choice(len(langs), p=probs / probs.sum()))]
        profile = languages[lang]
        chars = profile.sentence_length.sample(rng)
        enc = encoded_length(chars, profile, rng)
        return {"language": lang, "plaintext_chars": chars}, [payload_length(model, direction, action, enc)]
    if action is Action.IMAGE:
        side = IMAGE_SIDES[int(rng.integers(len(IMAGE_SIDES)))]
        size = png_surrogate_bytes(side, rng)
        return {"attachment_bytes": size}, [payload_length(model, direction, action, 0)]
    if action is Action.START:
        # Typing indicators are re-sent while the user keeps typing.
        repeats = 1 + int(rng.binomial(2, 0.5))
        return {}, [payload_length(model, direction, action, 0)] * repeats
    return {}, [payload_length(model, direction, action, 0)]


def generate(config: ScenarioConfig, models: Optional[Mapping[str, SizeModel]] = None,
             languages: Optional[Mapping[Language, LanguageProfile]] = None) -> Dataset:
    models = models if models is not None else builtin_models()
    languages = languages if languages is not None else builtin_languages()
    try:
        model = models[config.model]
    except KeyError:
        raise ConfigError(f"unknown size model {config.model!r}") from None
    control = config.control_packet_lengths
    if control is None:
        control = model.control_lengths
    counts = config.class_counts()
    if model.name == "attachment":
        counts = {a: n for a, n in counts.items() if a is Action.IMAGE}
        control = ()
    rng = np.random.default_rng(config.rng_seed)

    traces = []
    for action in USER_ACTIONS:
        for direction in config.directions:
            for _ in range(counts.get(action, 0)):
                extra, sizes = _content_packets(model, direction, action, rng, languages, config)
                sizes = list(sizes)
                for c in control:
                    if rng.random() < config.control_probability:
                        sizes.insert(int(rng.integers(len(sizes) + 1)), c)
                stream = f"{model.name}:{len(traces)}"
                gaps = rng.exponential(0.05, size=len(sizes))
                t = np.round(np.cumsum(gaps) - gaps[0], 6)
                packets = tuple(
                    PacketRecord(float(ts), direction, int(s), stream) for ts, s in zip(t, sizes)
                )
                label = Label(service=model.service, os=model.os, action=action, **extra)
                traces.append(LabeledTrace(packets, label))

    metadata = {
        "format_version": FORMAT_VERSION,
        "generator": "leakscope.simulator",
        "model": model.name,
        "synthetic_sizes": model.synthetic,
        "control_packet_lengths": list(control),
        "scenario": config.to_dict(),
    }
    return Dataset(tuple(traces), metadata)


def generate_many(configs: Sequence[ScenarioConfig], **kwargs) -> Dataset:
    parts = [generate(c, **kwargs) for c in configs]
    if len(parts) == 1:
        return parts[0]
    return merge_datasets(parts, {"format_version": FORMAT_VERSION, "parts": [p.metadata for p in parts]})


def imessage_scenarios(seed: int = 7, samples_per_class: int = 250, **overrides) -> list[ScenarioConfig]:
    """Both iMessage devices, all five actions, both directions."""
    return [
        ScenarioConfig(model="imessage-ios", samples_per_class=samples_per_class, rng_seed=seed, **overrides),
        ScenarioConfig(model="imessage-osx", samples_per_class=samples_per_class, rng_seed=seed + 1, **overrides),
    ]


def language_scenarios(seed: int = 11, samples_per_class: int = 24000, models=("imessage-ios", "imessage-osx")) -> list[ScenarioConfig]:
    """Text-only scenarios with enough messages per language for instance sampling."""
    return [
        ScenarioConfig(model=m, action_mix={Action.TEXT: 1.0}, samples_per_class=samples_per_class,
                       rng_seed=seed + i)
        for i, m in enumerate(models)
    ]


def attachment_scenario(seed: int = 13, samples_per_class: int = 300) -> ScenarioConfig:
    return ScenarioConfig(model="attachment", action_mix={Action.IMAGE: 1.0},
                          samples_per_class=samples_per_class, rng_seed=seed)


PRESETS = {
    "imessage": lambda seed: imessage_scenarios(seed),
    "imessage-language": lambda seed: language_scenarios(seed),
    "attachment": lambda seed: [attachment_scenario(seed)],
    "whatsapp": lambda seed: [ScenarioConfig(model="whatsapp", rng_seed=seed)],
    "viber": lambda seed: [ScenarioConfig(model="viber", rng_seed=seed)],
    "telegram": lambda seed: [ScenarioConfig(model="telegram", rng_seed=seed)],
}
