"""Synthetic labelled traffic.

Each class is a made-up "protocol" with its own header habits (port, TTL,
window, IP id behaviour) and payload byte statistics. Frames are built
byte-for-byte and pushed through the normal ingest path, so everything
downstream sees exactly what a capture would give it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import (
    PROTO_TCP,
    PROTO_UDP,
    Flow,
    PacketRecord,
    RawPacket,
    Timestamp,
    assemble_flows,
    build_ipv4_packet,
    build_tcp_header,
    build_udp_header,
    ethernet_frame,
    extract_packet_record,
    write_pcap,
    LINKTYPE_ETHERNET,
)


@dataclass(frozen=True)
class Profile:
    name: str
    proto: int
    server_port: int
    ttl: int
    window: int
    payload: str  # "random", "text" or "framed"
    payload_len: tuple[int, int]
    ack_prob: float = 0.2


PROFILES = (
    Profile("tls-like", PROTO_TCP, 443, 64, 0xFAF0, "random", (24, 120)),
    Profile("text-like", PROTO_TCP, 8080, 128, 0x2014, "text", (24, 120)),
    Profile("dgram-like", PROTO_UDP, 5353, 255, 0, "framed", (16, 64), ack_prob=0.0),
)

_TEXT = np.frombuffer(b"GET /index.html HTTP/1.1 Host: example Accept: text/plain abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)


def _payload(profile: Profile, rng: np.random.Generator) -> bytes:
    n = int(rng.integers(profile.payload_len[0], profile.payload_len[1] + 1))
    if profile.payload == "random":
        return rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    if profile.payload == "text":
        return _TEXT[rng.integers(0, len(_TEXT), n)].tobytes()
    # framed: small header, length, then low-entropy body
    body = rng.integers(0, 16, max(0, n - 4), dtype=np.uint8)
    return b"\xab\xcd" + (n - 4).to_bytes(2, "big") + body.tobytes()


def synth_flow_frames(
    profile: Profile, flow_index: int, n_packets: int, rng: np.random.Generator, t0: float = 1.7e9
) -> list[tuple[Timestamp, bytes]]:
    client = bytes([10, (flow_index >> 8) & 0xFF, flow_index & 0xFF, 2])
    server = bytes([172, 16, int(rng.integers(0, 256)), int(rng.integers(1, 255))])
    cport = int(rng.integers(1024, 65536))
    seqs = [int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32))]
    ident = int(rng.integers(0, 65536))
    ts = t0 + flow_index * 10.0
    frames = []
    for k in range(n_packets):
        outbound = k % 2 == 0
        src, dst = (client, server) if outbound else (server, client)
        sport, dport = (cport, profile.server_port) if outbound else (profile.server_port, cport)
        if profile.proto == PROTO_TCP:
            payload = b"" if k > 0 and rng.random() < profile.ack_prob else _payload(profile, rng)
            side = 0 if outbound else 1
            l4 = build_tcp_header(
                sport, dport, seqs[side], seqs[1 - side], flags=0x18 if payload else 0x10,
                window=profile.window + int(rng.integers(0, 16)),
            )
            seqs[side] = (seqs[side] + len(payload)) % 2**32
        else:
            payload = _payload(profile, rng)
            l4 = build_udp_header(sport, dport, len(payload))
        ip = build_ipv4_packet(src, dst, profile.proto, l4, payload, ttl=profile.ttl, ident=ident)
        ident = (ident + 1) % 65536
        ts += float(rng.exponential(0.05))
        sec = int(ts)
        frames.append((Timestamp(sec, int((ts - sec) * 1e9)), ethernet_frame(ip)))
    return frames


def frames_to_records(frames: list[tuple[Timestamp, bytes]]) -> list[PacketRecord]:
    recs = []
    for ts, frame in frames:
        rec = extract_packet_record(RawPacket(ts, LINKTYPE_ETHERNET, frame, len(frame)))
        assert isinstance(rec, PacketRecord)
        recs.append(rec)
    return recs


def synth_flows(
    flows_per_class: int,
    n_classes: int = 2,
    seed: int = 0,
    packets: tuple[int, int] = (3, 8),
) -> list[Flow]:
    """Labelled flows, classes interleaved; labels are profile indices."""
    if not 1 <= n_classes <= len(PROFILES):
        raise ValueError(f"n_classes must be in 1..{len(PROFILES)}")
    rng = np.random.default_rng(seed)
    flows = []
    for i in range(flows_per_class):
        for c in range(n_classes):
            n = int(rng.integers(packets[0], packets[1] + 1))
            frames = synth_flow_frames(PROFILES[c], i * n_classes + c, n, rng)
            (flow,) = assemble_flows(frames_to_records(frames))
            flow.label = c
            flows.append(flow)
    return flows


def header_corpus(n: int, seed: int = 0) -> list[PacketRecord]:
    """``n`` packet records drawn from the synthetic profiles (round robin)."""
    flows = synth_flows((n + 1) // 2, 2, seed, packets=(1, 1))
    return [f.packets[0] for f in flows][:n]


def write_synthetic_dataset(
    out_dir: str | Path, flows_per_class: int, n_classes: int = 2, seed: int = 0
) -> Path:
    """Write one pcap per class plus a ``manifest.csv`` of (pcap_path, flow_index, label)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for c in range(n_classes):
        frames = []
        for i in range(flows_per_class):
            n = int(rng.integers(3, 9))
            frames += synth_flow_frames(PROFILES[c], c * flows_per_class + i, n, rng)
        path = out / f"class{c}_{PROFILES[c].name}.pcap"
        path.write_bytes(write_pcap(frames, LINKTYPE_ETHERNET))
        rows += [(path.name, i, c) for i in range(flows_per_class)]
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pcap_path", "flow_index", "label"])
        w.writerows(rows)
    return manifest
