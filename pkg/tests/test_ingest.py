import struct

import pytest
from hypothesis import given, settings, strategies as st

from trage.errors import CorruptHeader, MalformedIP, MalformedTransport, TrageError, UnknownMagic
from trage.ingest import (
    ANON_V4,
    LINKTYPE_ETHERNET,
    LINKTYPE_RAW,
    Direction,
    FlowKey,
    PacketRecord,
    RawPacket,
    Skip,
    Timestamp,
    assemble_flows,
    build_ipv4_packet,
    build_tcp_header,
    build_udp_header,
    ethernet_frame,
    extract_packet_record,
    parse_pcap,
    write_pcap,
)

A = bytes([192, 168, 1, 10])
B = bytes([93, 184, 216, 34])


def reference_pcap(records, endian=">", magic=0xA1B2C3D4, link_type=1, snaplen=65535):
    """Hand-rolled pcap writer, independent of trage.ingest.write_pcap."""
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, link_type)
    for sec, usec, data, orig in records:
        out += struct.pack(endian + "IIII", sec, usec, len(data), orig) + data
    return out


def tcp_frame(src=A, dst=B, sport=51000, dport=443, payload=b"", seq=0xB11EAC20):
    ip = build_ipv4_packet(src, dst, 6, build_tcp_header(sport, dport, seq), payload)
    return ethernet_frame(ip)


def raw(frame, link_type=LINKTYPE_ETHERNET, ts=(0, 0)):
    return RawPacket(Timestamp(*ts), link_type, frame, len(frame))


class TestParsePcap:
    def test_header_only(self):
        assert parse_pcap(reference_pcap([])) == []

    def test_big_endian_record(self):
        frame = tcp_frame()
        assert len(frame) == 60
        data = reference_pcap([(1700000000, 123456, frame, 60)], endian=">")
        assert data[:4] == bytes.fromhex("a1b2c3d4")
        (pkt,) = parse_pcap(data)
        assert len(pkt.data) == 60
        assert pkt.data == frame
        assert pkt.orig_len == 60
        assert pkt.link_type == 1
        assert pkt.capture_ts == Timestamp(1700000000, 123456000)

    def test_little_endian_record(self):
        data = reference_pcap([(5, 7, b"\x01\x02", 2)], endian="<")
        assert data[:4] == bytes.fromhex("d4c3b2a1")
        (pkt,) = parse_pcap(data)
        assert pkt.capture_ts == Timestamp(5, 7000) and pkt.data == b"\x01\x02"

    def test_nanosecond_magic(self):
        data = reference_pcap([(5, 999_999_999, b"\x00", 1)], endian="<", magic=0xA1B23C4D)
        (pkt,) = parse_pcap(data)
        assert pkt.capture_ts == Timestamp(5, 999_999_999)

    def test_gif_is_unknown_magic(self):
        with pytest.raises(UnknownMagic):
            parse_pcap(b"GIF89a" + bytes(40))

    def test_truncated_trailing_record_dropped(self):
        data = reference_pcap([(1, 0, b"abcd", 4), (2, 0, b"efgh", 4)])
        assert len(parse_pcap(data[:-2])) == 1
        assert len(parse_pcap(data[:-6])) == 1  # partial record header

    def test_implausible_length_is_corrupt(self):
        data = reference_pcap([(1, 0, b"abcd", 4)], snaplen=65535)
        bad = data[:24] + struct.pack(">IIII", 1, 0, 10_000_000, 10_000_000) + b"abcd"
        with pytest.raises(CorruptHeader):
            parse_pcap(bad)

    def test_captured_exceeds_original(self):
        with pytest.raises(CorruptHeader):
            parse_pcap(reference_pcap([(1, 0, b"abcd", 2)]))

    def test_roundtrip_with_library_writer(self):
        frames = [(Timestamp(10, 5), tcp_frame()), (Timestamp(11, 6), tcp_frame(payload=b"xy"))]
        pkts = parse_pcap(write_pcap(frames))
        assert [(p.capture_ts, p.data) for p in pkts] == frames

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=200))
    def test_total_on_arbitrary_bytes(self, blob):
        try:
            parse_pcap(blob)
        except TrageError:
            pass

    @settings(max_examples=300, deadline=None)
    @given(st.binary(min_size=0, max_size=120))
    def test_total_on_mutated_body(self, body):
        try:
            parse_pcap(reference_pcap([]) + body)
        except TrageError:
            pass


class TestExtract:
    def test_tcp_split(self):
        rec = extract_packet_record(raw(tcp_frame(payload=b"\xde\xad\xbe\xef")))
        assert isinstance(rec, PacketRecord)
        assert len(rec.header_bytes) == 40
        assert rec.payload_bytes == b"\xde\xad\xbe\xef"
        assert rec.header_bytes[0] >> 4 == 4

    def test_udp_split(self):
        ip = build_ipv4_packet(A, B, 17, build_udp_header(53, 5353, 0))
        rec = extract_packet_record(raw(ethernet_frame(ip)))
        assert len(rec.header_bytes) == 28
        assert rec.payload_bytes == b""

    def test_arp_skipped(self):
        frame = bytes(12) + b"\x08\x06" + bytes(28)
        assert isinstance(extract_packet_record(raw(frame)), Skip)

    def test_icmp_and_fragment_skipped(self):
        icmp = build_ipv4_packet(A, B, 1, b"\x08\x00" + bytes(6))
        assert isinstance(extract_packet_record(raw(icmp, LINKTYPE_RAW)), Skip)
        frag = build_ipv4_packet(A, B, 6, build_tcp_header(1, 2, 3), flags_frag=0x2000)
        assert extract_packet_record(raw(frag, LINKTYPE_RAW)).reason == "ip fragment"

    def test_vlan_tag(self):
        ip = build_ipv4_packet(A, B, 6, build_tcp_header(1, 2, 3), b"zz")
        frame = bytes(12) + b"\x81\x00\x00\x05\x08\x00" + ip
        rec = extract_packet_record(raw(frame))
        assert rec.payload_bytes == b"zz" and len(rec.header_bytes) == 40

    def test_raw_ip_link(self):
        ip = build_ipv4_packet(A, B, 6, build_tcp_header(1, 2, 3), b"q")
        rec = extract_packet_record(raw(ip, LINKTYPE_RAW))
        assert rec.payload_bytes == b"q"

    def test_tcp_options_in_header(self):
        tcp = build_tcp_header(1, 2, 3, options=b"\x02\x04\x05\xb4")
        rec = extract_packet_record(raw(build_ipv4_packet(A, B, 6, tcp, b"p"), LINKTYPE_RAW))
        assert len(rec.header_bytes) == 44 and rec.payload_bytes == b"p"

    def test_addresses_anonymised_rest_intact(self):
        frame = tcp_frame(payload=b"hello")
        rec = extract_packet_record(raw(frame))
        ip = frame[14 : 14 + 45]
        joined = rec.header_bytes + rec.payload_bytes
        assert len(joined) == len(ip)
        assert joined[12:20] == ANON_V4[0] + ANON_V4[1]
        assert joined[:12] == ip[:12] and joined[20:] == ip[20:]

    def test_ihl_below_five(self):
        ip = bytearray(build_ipv4_packet(A, B, 6, build_tcp_header(1, 2, 3)))
        ip[0] = 0x44
        with pytest.raises(MalformedIP):
            extract_packet_record(raw(bytes(ip), LINKTYPE_RAW))

    def test_total_length_inconsistent(self):
        ip = bytearray(build_ipv4_packet(A, B, 6, build_tcp_header(1, 2, 3)))
        ip[2:4] = (200).to_bytes(2, "big")
        with pytest.raises(MalformedIP):
            extract_packet_record(raw(bytes(ip), LINKTYPE_RAW))

    def test_tcp_offset_below_five(self):
        tcp = bytearray(build_tcp_header(1, 2, 3))
        tcp[12] = 0x40
        with pytest.raises(MalformedTransport):
            extract_packet_record(raw(build_ipv4_packet(A, B, 6, bytes(tcp)), LINKTYPE_RAW))

    def test_ipv6_tcp(self):
        tcp = build_tcp_header(443, 50000, 1)
        src, dst = bytes(15) + b"\x05", bytes(15) + b"\x09"
        ip6 = struct.pack(">IHBB", 6 << 28, len(tcp) + 3, 6, 64) + src + dst + tcp + b"abc"
        rec = extract_packet_record(raw(ip6, LINKTYPE_RAW))
        assert len(rec.header_bytes) == 60 and rec.payload_bytes == b"abc"
        assert rec.flow_key.addr_a == src

    def test_ipv6_extension_header_skipped(self):
        ip6 = struct.pack(">IHBB", 6 << 28, 8, 0, 64) + bytes(32) + bytes(8)
        assert isinstance(extract_packet_record(raw(ip6, LINKTYPE_RAW)), Skip)

    def test_both_directions_share_key(self):
        fwd = extract_packet_record(raw(tcp_frame(A, B, 51000, 443)))
        rev = extract_packet_record(raw(tcp_frame(B, A, 443, 51000)))
        assert fwd.flow_key == rev.flow_key
        assert {fwd.direction, rev.direction} == {Direction.A_TO_B, Direction.B_TO_A}

    @settings(max_examples=200, deadline=None)
    @given(st.binary(min_size=4, max_size=4), st.binary(min_size=4, max_size=4),
           st.integers(0, 65535), st.integers(0, 65535))
    def test_canonical_key_property(self, src, dst, sp, dp):
        k1, d1 = FlowKey.from_endpoints(src, sp, dst, dp, 6)
        k2, d2 = FlowKey.from_endpoints(dst, dp, src, sp, 6)
        assert k1 == k2
        assert (k1.addr_a, k1.port_a) <= (k1.addr_b, k1.port_b)
        if (src, sp) != (dst, dp):
            assert d1 != d2


class TestFlows:
    def rec(self, key_src, ts, sport=1000):
        frame = tcp_frame(key_src, B, sport, 443)
        return extract_packet_record(raw(frame, ts=(ts, 0)))

    def test_two_directions_one_flow(self):
        a = extract_packet_record(raw(tcp_frame(A, B, 51000, 443), ts=(1, 0)))
        b = extract_packet_record(raw(tcp_frame(B, A, 443, 51000), ts=(2, 0)))
        (flow,) = assemble_flows([a, b])
        assert len(flow.packets) == 2

    def test_empty(self):
        assert assemble_flows([]) == []

    def test_group_sizes_match_bruteforce(self):
        recs = [self.rec(A, 3), self.rec(A, 1, sport=2000), self.rec(A, 2)]
        flows = assemble_flows(recs)
        brute = {}
        for r in recs:
            brute[r.flow_key] = brute.get(r.flow_key, 0) + 1
        assert sorted(len(f.packets) for f in flows) == sorted(brute.values()) == [1, 2]
        assert flows[0].key == recs[0].flow_key  # order of first appearance
        assert [p.capture_ts.sec for p in flows[0].packets] == [2, 3]

    def test_stable_sort_on_equal_timestamps(self):
        r1 = extract_packet_record(raw(tcp_frame(payload=b"1"), ts=(5, 0)))
        r2 = extract_packet_record(raw(tcp_frame(payload=b"2"), ts=(5, 0)))
        (flow,) = assemble_flows([r1, r2])
        assert [p.payload_bytes for p in flow.packets] == [b"1", b"2"]
