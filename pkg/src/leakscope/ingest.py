"""Parse classic pcap captures and the canonical NDJSON dataset format."""
from __future__ import annotations

import enum
import ipaddress
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

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
)
from .errors import (
    AmbiguousDirection,
    BadMagic,
    ConfigError,
    FormatVersionMismatch,
    MalformedLine,
    TruncatedPacket,
    UnsupportedLinkType,
)

log = logging.getLogger(__name__)

APNS_PORT = 5223
HTTPS_PORT = 443


class LinkType(str, enum.Enum):
    ETHERNET = "Ethernet"
    RAW_IP = "RawIP"


# pcap LINKTYPE_* values accepted for each configured link type.
_LINKTYPE_CODES = {
    LinkType.ETHERNET: {1},
    LinkType.RAW_IP: {101, 228},
}

_MAGICS = {
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
}

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = 0x8100


@dataclass(frozen=True)
class CaptureConfig:
    service_ports: frozenset[int] = frozenset({APNS_PORT, HTTPS_PORT})
    service_addresses: frozenset[str] = frozenset()
    link_type: LinkType = LinkType.ETHERNET
    strict: bool = True  # raise on packets whose direction cannot be decided

    def __post_init__(self):
        object.__setattr__(self, "service_ports", frozenset(int(p) for p in self.service_ports))
        addrs = frozenset(str(ipaddress.ip_address(a)) for a in self.service_addresses)
        object.__setattr__(self, "service_addresses", addrs)
        object.__setattr__(self, "link_type", LinkType(self.link_type))
        if not self.service_ports and not self.service_addresses:
            raise ConfigError("service_ports must be non-empty when service_addresses is empty")

    @classmethod
    def from_dict(cls, d: dict) -> "CaptureConfig":
        kwargs: dict[str, Any] = {}
        unknown = set(d) - {"service_ports", "service_addresses", "link_type", "strict"}
        if unknown:
            raise ConfigError(f"unknown capture keys: {sorted(unknown)}")
        if "service_ports" in d:
            kwargs["service_ports"] = frozenset(d["service_ports"])
        if "service_addresses" in d:
            kwargs["service_addresses"] = frozenset(d["service_addresses"])
        if "link_type" in d:
            try:
                kwargs["link_type"] = LinkType(d["link_type"])
            except ValueError as e:
                raise ConfigError(f"link_type must be one of {[t.value for t in LinkType]}") from e
        if "strict" in d:
            kwargs["strict"] = bool(d["strict"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "service_ports": sorted(self.service_ports),
            "service_addresses": sorted(self.service_addresses),
            "link_type": self.link_type.value,
            "strict": self.strict,
        }


@dataclass
class PcapStats:
    frames: int = 0
    tcp_segments: int = 0
    empty_payload: int = 0
    skipped_ipv6: int = 0
    skipped_other: int = 0
    skipped_undirected: int = 0
    link_code: Optional[int] = None
    first_timestamp: Optional[float] = None


def _direction(src: str, sport: int, dst: str, dport: int, config: CaptureConfig) -> Optional[Direction]:
    if config.service_addresses:
        if dst in config.service_addresses and src not in config.service_addresses:
            return Direction.TO_SERVICE
        if src in config.service_addresses and dst not in config.service_addresses:
            return Direction.FROM_SERVICE
    to = dport in config.service_ports
    frm = sport in config.service_ports
    if to and not frm:
        return Direction.TO_SERVICE
    if frm and not to:
        return Direction.FROM_SERVICE
    return None


def _ipv4_tcp(buf: bytes, off: int, frame_no: int):
    """Return (src, dst, sport, dport, seq, payload_len) or None for non-TCP/fragments."""
    if len(buf) - off < 20:
        raise TruncatedPacket(f"frame {frame_no}: IPv4 header truncated")
    vihl = buf[off]
    if vihl >> 4 != 4:
        return None
    ihl = (vihl & 0x0F) * 4
    total_len, frag, proto = struct.unpack_from("!H2xH1xB", buf, off + 2)
    if proto != 6 or frag & 0x1FFF:
        return None
    if len(buf) - off < ihl + 20:
        raise TruncatedPacket(f"frame {frame_no}: TCP header truncated")
    src = str(ipaddress.IPv4Address(buf[off + 12:off + 16]))
    dst = str(ipaddress.IPv4Address(buf[off + 16:off + 20]))
    t = off + ihl
    sport, dport, seq, doff = struct.unpack_from("!HHI4xB", buf, t)
    tcp_hlen = (doff >> 4) * 4
    # Payload size comes from the IP header so snaplen-truncated frames still count.
    payload = total_len - ihl - tcp_hlen
    return src, dst, sport, dport, seq, max(payload, 0)


def parse_pcap(data: bytes, config: CaptureConfig, stats: Optional[PcapStats] = None) -> list[PacketRecord]:
    """One record per IPv4 TCP segment with a non-empty payload."""
    if stats is None:
        stats = PcapStats()
    if len(data) < 24:
        raise BadMagic("file shorter than a pcap global header")
    try:
        endian, ts_scale = _MAGICS[bytes(data[:4])]
    except KeyError:
        raise BadMagic(f"unrecognised magic 0x{bytes(data[:4]).hex()}") from None
    (network,) = struct.unpack_from(endian + "I", data, 20)
    stats.link_code = network
    if network not in _LINKTYPE_CODES[config.link_type]:
        raise UnsupportedLinkType(f"pcap link type {network} does not match {config.link_type.value}")

    records: list[PacketRecord] = []
    off = 24
    frame_no = 0
    rec_hdr = struct.Struct(endian + "IIII")
    while off < len(data):
        frame_no += 1
        if len(data) - off < 16:
            raise TruncatedPacket(f"frame {frame_no}: record header truncated")
        ts_sec, ts_frac, incl_len, _orig = rec_hdr.unpack_from(data, off)
        off += 16
        if incl_len > len(data) - off:
            raise TruncatedPacket(f"frame {frame_no}: header claims {incl_len} bytes, {len(data) - off} present")
        frame = bytes(data[off:off + incl_len])
        off += incl_len
        stats.frames += 1
        ts = ts_sec + ts_frac * ts_scale
        if stats.first_timestamp is None:
            stats.first_timestamp = ts

        ip_off = 0
        if config.link_type is LinkType.ETHERNET:
            if len(frame) < 14:
                raise TruncatedPacket(f"frame {frame_no}: ethernet header truncated")
            (etype,) = struct.unpack_from("!H", frame, 12)
            ip_off = 14
            if etype == ETH_VLAN:
                if len(frame) < 18:
                    raise TruncatedPacket(f"frame {frame_no}: VLAN tag truncated")
                (etype,) = struct.unpack_from("!H", frame, 16)
                ip_off = 18
            if etype == ETH_IPV6:
                stats.skipped_ipv6 += 1
                continue
            if etype != ETH_IPV4:
                stats.skipped_other += 1
                continue
        elif frame and frame[0] >> 4 == 6:
            stats.skipped_ipv6 += 1
            continue

        parsed = _ipv4_tcp(frame, ip_off, frame_no)
        if parsed is None:
            stats.skipped_other += 1
            continue
        src, dst, sport, dport, seq, plen = parsed
        stats.tcp_segments += 1
        if plen == 0:
            stats.empty_payload += 1
            continue
        direction = _direction(src, sport, dst, dport, config)
        if direction is None:
            if config.strict:
                raise AmbiguousDirection(f"frame {frame_no}: cannot tell which of {src}:{sport} / {dst}:{dport} is the service")
            stats.skipped_undirected += 1
            continue
        if direction is Direction.TO_SERVICE:
            stream = f"{src}:{sport}-{dst}:{dport}"
        else:
            stream = f"{dst}:{dport}-{src}:{sport}"
        records.append(PacketRecord(ts, direction, plen, stream, seq))
    if stats.skipped_ipv6:
        log.info("skipped %d IPv6 frames", stats.skipped_ipv6)
    return records


def records_to_dataset(records: Iterable[PacketRecord], label: Label, metadata: Optional[dict] = None) -> Dataset:
    """Group records into one trace per stream, in order of first appearance."""
    streams: dict[str, list[PacketRecord]] = {}
    for r in records:
        streams.setdefault(r.stream_id, []).append(r)
    traces = [LabeledTrace(tuple(ps), label) for ps in streams.values()]
    return Dataset(tuple(traces), dict(metadata or {}))


# --- canonical format -------------------------------------------------------

def label_to_dict(label: Label) -> dict:
    return {
        "service": label.service.value,
        "os": label.os.value,
        "action": label.action.value,
        "language": label.language.value if label.language is not None else None,
        "plaintext_chars": label.plaintext_chars,
        "attachment_bytes": label.attachment_bytes,
    }


def label_from_dict(d: dict) -> Label:
    lang = d.get("language")
    return Label(
        service=Service(d["service"]),
        os=OS(d.get("os", "Unknown")),
        action=Action(d["action"]),
        language=Language(lang) if lang not in (None, "None") else None,
        plaintext_chars=d.get("plaintext_chars"),
        attachment_bytes=d.get("attachment_bytes"),
    )


def packet_to_dict(p: PacketRecord) -> dict:
    d = {"t": p.timestamp, "dir": p.direction.value, "len": p.payload_length, "stream": p.stream_id}
    if p.seq_hint is not None:
        d["seq"] = p.seq_hint
    return d


def packet_from_dict(d: dict) -> PacketRecord:
    return PacketRecord(
        timestamp=float(d["t"]),
        direction=Direction(d["dir"]),
        payload_length=int(d["len"]),
        stream_id=str(d["stream"]),
        seq_hint=d.get("seq"),
    )


def trace_to_dict(trace: LabeledTrace) -> dict:
    return {"label": label_to_dict(trace.label), "packets": [packet_to_dict(p) for p in trace.packets]}


def trace_from_dict(d: dict) -> LabeledTrace:
    return LabeledTrace(tuple(packet_from_dict(p) for p in d["packets"]), label_from_dict(d["label"]))


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_lines(dataset: Dataset) -> Iterable[str]:
    yield _dumps({"format_version": FORMAT_VERSION, "metadata": dataset.metadata})
    for trace in dataset.traces:
        yield _dumps(trace_to_dict(trace))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(dataset: Dataset, path) -> None:
    atomic_write_text(path, "".join(line + "\n" for line in dataset_lines(dataset)))


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise MalformedLine(1, "missing header")
    try:
        header = json.loads(lines[0])
        version = header["format_version"]
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedLine(1, f"bad header: {e}") from None
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"file format_version {version}, supported {FORMAT_VERSION}")
    traces = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            traces.append(trace_from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as e:
            raise MalformedLine(lineno, str(e)) from None
    return Dataset(tuple(traces), header.get("metadata") or {})
