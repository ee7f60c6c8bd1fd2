"""Packet capture ingestion.

Reads classic libpcap files, strips the link layer, splits every TCP/UDP
packet into its header bytes (IP + transport header) and payload bytes, and
groups packets into bidirectional flows keyed on a canonical 5-tuple.
"""

from __future__ import annotations

import enum
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .errors import CorruptHeader, MalformedIP, MalformedTransport, TrageError, UnknownMagic

log = logging.getLogger(__name__)

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
# Upper bound on a plausible record when the file declares no snaplen.
MAX_RECORD_LEN = 262144

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
DLT_RAW_BSD = 12
RAW_LINK_TYPES = frozenset({LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6, DLT_RAW_BSD})

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100

PROTO_TCP = 6
PROTO_UDP = 17

ANON_V4 = (bytes(4), bytes(3) + b"\x01")
ANON_V6 = (bytes(16), bytes(15) + b"\x01")


class Timestamp(NamedTuple):
    sec: int
    nsec: int

    @property
    def seconds(self) -> float:
        return self.sec + self.nsec * 1e-9


@dataclass(frozen=True, slots=True)
class RawPacket:
    """One pcap record as stored on disk."""

    capture_ts: Timestamp
    link_type: int
    data: bytes
    orig_len: int


class Direction(enum.IntEnum):
    A_TO_B = 0
    B_TO_A = 1


@dataclass(frozen=True, slots=True, order=True)
class FlowKey:
    """Canonical bidirectional 5-tuple; ``(addr_a, port_a) <= (addr_b, port_b)``."""

    addr_a: bytes
    addr_b: bytes
    port_a: int
    port_b: int
    proto: int

    @classmethod
    def from_endpoints(
        cls, src: bytes, sport: int, dst: bytes, dport: int, proto: int
    ) -> tuple["FlowKey", Direction]:
        if (src, sport) <= (dst, dport):
            return cls(src, dst, sport, dport, proto), Direction.A_TO_B
        return cls(dst, src, dport, sport, proto), Direction.B_TO_A

    def __str__(self) -> str:
        name = {PROTO_TCP: "tcp", PROTO_UDP: "udp"}.get(self.proto, str(self.proto))
        return f"{_fmt_addr(self.addr_a)}:{self.port_a} <-> {_fmt_addr(self.addr_b)}:{self.port_b} {name}"


@dataclass(frozen=True, slots=True)
class PacketRecord:
    flow_key: FlowKey
    direction: Direction
    header_bytes: bytes
    payload_bytes: bytes
    capture_ts: Timestamp


@dataclass(slots=True)
class Flow:
    key: FlowKey
    packets: list[PacketRecord]
    label: int | None = None


@dataclass(frozen=True, slots=True)
class Skip:
    """Returned by :func:`extract_packet_record` for packets outside scope."""

    reason: str


@dataclass
class IngestStats:
    """Diagnostics counters for one ingestion run."""

    packets: int = 0
    records: int = 0
    skipped: Counter = field(default_factory=Counter)
    errors: Counter = field(default_factory=Counter)

    def summary(self) -> str:
        parts = [f"packets={self.packets}", f"records={self.records}"]
        parts += [f"skip[{k}]={v}" for k, v in sorted(self.skipped.items())]
        parts += [f"error[{k}]={v}" for k, v in sorted(self.errors.items())]
        return " ".join(parts)


def _fmt_addr(addr: bytes) -> str:
    import ipaddress

    return str(ipaddress.ip_address(addr))


# ---------------------------------------------------------------------------
# pcap container


def parse_pcap(file_bytes: bytes) -> list[RawPacket]:
    """Parse a classic pcap byte stream into packets in file order.

    A truncated trailing record is dropped silently. A record whose declared
    captured length is implausible (beyond the snaplen, or beyond its own
    original length) raises :class:`CorruptHeader`.
    """
    buf = memoryview(bytes(file_bytes))
    if len(buf) < 4:
        raise UnknownMagic("stream shorter than a pcap magic number")
    magic_le = struct.unpack_from("<I", buf, 0)[0]
    magic_be = struct.unpack_from(">I", buf, 0)[0]
    if magic_le in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
        endian, magic = "<", magic_le
    elif magic_be in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
        endian, magic = ">", magic_be
    else:
        raise UnknownMagic(f"unrecognised magic {bytes(buf[:4]).hex()}")
    if len(buf) < GLOBAL_HEADER_LEN:
        raise CorruptHeader("truncated global header")

    _vmaj, _vmin, _zone, _sigfigs, snaplen, link_type = struct.unpack_from(
        endian + "HHiIII", buf, 4
    )
    frac_scale = 1 if magic == PCAP_MAGIC_NSEC else 1000
    frac_limit = 10**9 if magic == PCAP_MAGIC_NSEC else 10**6
    max_len = snaplen if 0 < snaplen <= MAX_RECORD_LEN else MAX_RECORD_LEN
    rec_fmt = endian + "IIII"

    packets: list[RawPacket] = []
    off = GLOBAL_HEADER_LEN
    n = len(buf)
    while off + RECORD_HEADER_LEN <= n:
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack_from(rec_fmt, buf, off)
        if incl_len > max_len:
            raise CorruptHeader(f"record at offset {off} declares {incl_len} captured bytes")
        if incl_len > orig_len:
            raise CorruptHeader(f"record at offset {off}: captured {incl_len} > original {orig_len}")
        if ts_frac >= frac_limit:
            raise CorruptHeader(f"record at offset {off}: sub-second field {ts_frac} out of range")
        start = off + RECORD_HEADER_LEN
        if start + incl_len > n:
            log.debug("dropping truncated trailing record at offset %d", off)
            break
        packets.append(
            RawPacket(
                capture_ts=Timestamp(ts_sec, ts_frac * frac_scale),
                link_type=link_type,
                data=bytes(buf[start : start + incl_len]),
                orig_len=orig_len,
            )
        )
        off = start + incl_len
    return packets


def read_pcap(path: str | Path) -> list[RawPacket]:
    return parse_pcap(Path(path).read_bytes())


def write_pcap(
    packets: Iterable[tuple[Timestamp, bytes]],
    link_type: int = LINKTYPE_ETHERNET,
    nanosecond: bool = True,
    snaplen: int = 65535,
) -> bytes:
    """Serialise ``(timestamp, frame)`` pairs as a little-endian classic pcap."""
    magic = PCAP_MAGIC_NSEC if nanosecond else PCAP_MAGIC_USEC
    out = [struct.pack("<IHHiIII", magic, 2, 4, 0, 0, snaplen, link_type)]
    for ts, frame in packets:
        frac = ts.nsec if nanosecond else ts.nsec // 1000
        out.append(struct.pack("<IIII", ts.sec, frac, len(frame), len(frame)))
        out.append(frame)
    return b"".join(out)


# ---------------------------------------------------------------------------
# per-packet dissection


def strip_link_layer(pkt: RawPacket) -> bytes | Skip:
    data = pkt.data
    if pkt.link_type in RAW_LINK_TYPES:
        return data
    if pkt.link_type != LINKTYPE_ETHERNET:
        return Skip(f"link type {pkt.link_type}")
    if len(data) < 14:
        return Skip("short ethernet frame")
    ethertype = int.from_bytes(data[12:14], "big")
    off = 14
    if ethertype == ETHERTYPE_VLAN:
        if len(data) < 18:
            return Skip("short vlan frame")
        ethertype = int.from_bytes(data[16:18], "big")
        off = 18
    if ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
        return Skip(f"ethertype 0x{ethertype:04x}")
    return data[off:]


def extract_packet_record(pkt: RawPacket) -> PacketRecord | Skip:
    """Split one captured packet into anonymised header bytes and payload bytes.

    Returns a :class:`Skip` for non-IP, non-TCP/UDP, fragmented or IPv6
    extension-header packets. Raises :class:`MalformedIP` or
    :class:`MalformedTransport` on inconsistent headers.
    """
    ip = strip_link_layer(pkt)
    if isinstance(ip, Skip):
        return ip
    if not ip:
        return Skip("empty network layer")
    complete = len(pkt.data) >= pkt.orig_len
    version = ip[0] >> 4
    if version == 4:
        return _dissect_v4(ip, complete, pkt.capture_ts)
    if version == 6:
        return _dissect_v6(ip, complete, pkt.capture_ts)
    return Skip(f"ip version {version}")


def _dissect_v4(ip: bytes, complete: bool, ts: Timestamp) -> PacketRecord | Skip:
    if len(ip) < 20:
        raise MalformedIP(f"ipv4 header needs 20 bytes, have {len(ip)}")
    ihl = (ip[0] & 0x0F) * 4
    if ihl < 20:
        raise MalformedIP(f"IHL {ihl // 4} < 5")
    total = int.from_bytes(ip[2:4], "big")
    if total < ihl or len(ip) < ihl:
        raise MalformedIP(f"total length {total} inconsistent with IHL {ihl // 4}")
    if total > len(ip):
        if complete:
            raise MalformedIP(f"total length {total} exceeds the {len(ip)} bytes on the wire")
    else:
        ip = ip[:total]  # drop link-layer padding
    frag = int.from_bytes(ip[6:8], "big")
    if frag & 0x2000 or frag & 0x1FFF:
        return Skip("ip fragment")
    proto = ip[9]
    if proto not in (PROTO_TCP, PROTO_UDP):
        return Skip(f"ip proto {proto}")
    src, dst = ip[12:16], ip[16:20]
    anon = ANON_V4[0] + ANON_V4[1]
    ip_header = ip[:12] + anon + ip[20:ihl]
    return _dissect_transport(ip_header, ip[ihl:], proto, src, dst, ts)


def _dissect_v6(ip: bytes, complete: bool, ts: Timestamp) -> PacketRecord | Skip:
    if len(ip) < 40:
        raise MalformedIP(f"ipv6 header needs 40 bytes, have {len(ip)}")
    plen = int.from_bytes(ip[4:6], "big")
    if 40 + plen > len(ip):
        if complete:
            raise MalformedIP(f"payload length {plen} exceeds the {len(ip) - 40} bytes on the wire")
    else:
        ip = ip[: 40 + plen]
    proto = ip[6]
    if proto not in (PROTO_TCP, PROTO_UDP):
        return Skip(f"ipv6 next header {proto}")
    src, dst = ip[8:24], ip[24:40]
    ip_header = ip[:8] + ANON_V6[0] + ANON_V6[1]
    return _dissect_transport(ip_header, ip[40:], proto, src, dst, ts)


def _dissect_transport(
    ip_header: bytes, seg: bytes, proto: int, src: bytes, dst: bytes, ts: Timestamp
) -> PacketRecord:
    if proto == PROTO_TCP:
        if len(seg) < 20:
            raise MalformedTransport(f"tcp header needs 20 bytes, have {len(seg)}")
        doff = (seg[12] >> 4) * 4
        if doff < 20:
            raise MalformedTransport(f"tcp data offset {doff // 4} < 5")
        if doff > len(seg):
            raise MalformedTransport(f"tcp data offset {doff // 4} runs past the segment")
        hlen = doff
    else:
        if len(seg) < 8:
            raise MalformedTransport(f"udp header needs 8 bytes, have {len(seg)}")
        hlen = 8
    sport = int.from_bytes(seg[0:2], "big")
    dport = int.from_bytes(seg[2:4], "big")
    key, direction = FlowKey.from_endpoints(src, sport, dst, dport, proto)
    return PacketRecord(
        flow_key=key,
        direction=direction,
        header_bytes=ip_header + seg[:hlen],
        payload_bytes=seg[hlen:],
        capture_ts=ts,
    )


def iter_records(
    packets: Iterable[RawPacket], stats: IngestStats | None = None
) -> Iterator[PacketRecord]:
    """Yield records, counting skips and malformed packets into ``stats``."""
    if stats is None:
        stats = IngestStats()
    for pkt in packets:
        stats.packets += 1
        try:
            rec = extract_packet_record(pkt)
        except TrageError as exc:
            stats.errors[type(exc).__name__] += 1
            log.debug("malformed packet: %s", exc)
            continue
        if isinstance(rec, Skip):
            stats.skipped[rec.reason] += 1
            continue
        stats.records += 1
        yield rec


def assemble_flows(records: Iterable[PacketRecord]) -> list[Flow]:
    """Group records by canonical flow key.

    Flows come out in order of first appearance; packets inside a flow are
    stably sorted by capture time.
    """
    groups: dict[FlowKey, list[PacketRecord]] = {}
    for rec in records:
        groups.setdefault(rec.flow_key, []).append(rec)
    return [
        Flow(key=key, packets=sorted(recs, key=lambda r: r.capture_ts))
        for key, recs in groups.items()
    ]


def load_flows(path: str | Path, stats: IngestStats | None = None) -> list[Flow]:
    """Read a pcap file and return its flows."""
    stats = stats if stats is not None else IngestStats()
    flows = assemble_flows(iter_records(read_pcap(path), stats))
    log.info("%s: %s flows=%d", path, stats.summary(), len(flows))
    return flows


def load_records(paths: Iterable[str | Path], stats: IngestStats | None = None) -> list[PacketRecord]:
    stats = stats if stats is not None else IngestStats()
    out: list[PacketRecord] = []
    for path in paths:
        out.extend(iter_records(read_pcap(path), stats))
    log.info("ingest: %s", stats.summary())
    return out


# ---------------------------------------------------------------------------
# packet construction (fixtures, synthetic corpora)


def build_ipv4_packet(
    src: bytes,
    dst: bytes,
    proto: int,
    transport_header: bytes,
    payload: bytes = b"",
    ttl: int = 64,
    ident: int = 0,
    tos: int = 0,
    flags_frag: int = 0x4000,
) -> bytes:
    """Assemble an IPv4 datagram (no options) with a valid header checksum."""
    total = 20 + len(transport_header) + len(payload)
    hdr = struct.pack(
        ">BBHHHBBH4s4s", 0x45, tos, total, ident, flags_frag, ttl, proto, 0, src, dst
    )
    csum = _inet_checksum(hdr)
    hdr = hdr[:10] + csum.to_bytes(2, "big") + hdr[12:]
    return hdr + transport_header + payload


def build_tcp_header(
    sport: int,
    dport: int,
    seq: int,
    ack: int = 0,
    flags: int = 0x18,
    window: int = 65535,
    options: bytes = b"",
) -> bytes:
    if len(options) % 4:
        options += bytes(4 - len(options) % 4)
    doff = (20 + len(options)) // 4
    return struct.pack(">HHIIBBHHH", sport, dport, seq, ack, doff << 4, flags, window, 0, 0) + options


def build_udp_header(sport: int, dport: int, payload_len: int) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + payload_len, 0)


def ethernet_frame(ip_packet: bytes, ethertype: int = ETHERTYPE_IPV4) -> bytes:
    frame = bytes(6) + b"\x02" + bytes(5) + ethertype.to_bytes(2, "big") + ip_packet
    return frame + bytes(max(0, 60 - len(frame)))


def _inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack(f">{len(data) // 2}H", data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF
