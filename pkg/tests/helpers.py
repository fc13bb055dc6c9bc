"""Hand-assembled pcap frames and small datasets shared by the tests."""
from __future__ import annotations

import socket
import struct

from leakscope.core import OS, Action, Dataset, Direction, Label, LabeledTrace, Language, PacketRecord, Service

CLIENT = "10.0.0.2"
SERVER = "17.57.144.10"


def tcp_segment(src, dst, sport, dport, payload: bytes, seq=1000, ip_id=1, frag=0, proto=6, tcp_opts=b""):
    """IPv4 + TCP bytes; checksums are left at zero (the parser ignores them)."""
    doff = (20 + len(tcp_opts)) // 4
    tcp = struct.pack("!HHIIBBHHH", sport, dport, seq, 0, doff << 4, 0x18, 65535, 0, 0) + tcp_opts
    if proto != 6:
        tcp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    total = 20 + len(tcp) + len(payload)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, ip_id, frag, 64, proto, 0,
                     socket.inet_aton(src), socket.inet_aton(dst))
    return ip + tcp + payload


def ether(ip_bytes: bytes, ethertype=0x0800, vlan=None) -> bytes:
    head = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02"
    if vlan is not None:
        head += struct.pack("!HH", 0x8100, vlan)
    return head + struct.pack("!H", ethertype) + ip_bytes


def pcap_bytes(frames, endian="<", nano=False, linktype=1, snaplen=65535) -> bytes:
    """frames: iterable of (timestamp_seconds, frame_bytes)."""
    magic = 0xA1B23C4D if nano else 0xA1B2C3D4
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype)
    scale = 10**9 if nano else 10**6
    for ts, frame in frames:
        sec = int(ts)
        frac = int(round((ts - sec) * scale))
        out += struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


def conversation():
    """Six frames: four data segments, one pure ACK and one retransmission.

    Returns (frames, expected) where expected lists (direction, payload, seq).
    """
    frames = [
        (1.000001, ether(tcp_segment(CLIENT, SERVER, 50000, 5223, b"a" * 101, seq=1))),
        (1.250000, ether(tcp_segment(SERVER, CLIENT, 5223, 50000, b"b" * 37, seq=9000))),
        (1.500000, ether(tcp_segment(CLIENT, SERVER, 50000, 5223, b"", seq=102))),
        (2.000000, ether(tcp_segment(CLIENT, SERVER, 50000, 5223, b"c" * 196, seq=102), vlan=7)),
        (2.000500, ether(tcp_segment(CLIENT, SERVER, 50000, 5223, b"c" * 196, seq=102), vlan=7)),
        (3.000000, ether(tcp_segment(SERVER, CLIENT, 5223, 50000, b"d" * 53, seq=9037,
                                     tcp_opts=b"\x01\x01\x08\x0a" + b"\x00" * 8))),
    ]
    to, frm = Direction.TO_SERVICE, Direction.FROM_SERVICE
    expected = [(to, 101, 1), (frm, 37, 9000), (to, 196, 102), (to, 196, 102), (frm, 53, 9037)]
    return frames, expected


def text_label(chars=10, lang=Language.ENGLISH, os_=OS.IOS):
    return Label(Service.IMESSAGE, os_, Action.TEXT, lang, chars)


def simple_label(action: Action, os_=OS.IOS):
    if action is Action.TEXT:
        return text_label(os_=os_)
    if action is Action.IMAGE:
        return Label(Service.IMESSAGE, os_, action, attachment_bytes=12345)
    return Label(Service.IMESSAGE, os_, action)


def trace(lengths, label=None, direction=Direction.TO_SERVICE, stream="s"):
    label = label or simple_label(Action.START)
    pk = tuple(PacketRecord(0.1 * i, direction, n, stream) for i, n in enumerate(lengths))
    return LabeledTrace(pk, label)


def dataset(traces, **meta) -> Dataset:
    return Dataset(tuple(traces), {"format_version": 1, **meta})
