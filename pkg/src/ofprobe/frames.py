"""Builders and parsers for the raw Ethernet frames the probes ride in.

Covers ICMP Echo, ICMP Time Exceeded, gratuitous ARP, and a private
router-identity exchange carried in ICMP type 200.  All multi-byte fields
are network byte order; MAC addresses are colon-separated strings and IPv4
addresses dotted quads.
"""

import socket
import struct
from dataclasses import dataclass
from enum import Enum

ETH_TYPE_IPV4 = 0x0800
ETH_TYPE_ARP = 0x0806

IP_PROTO_ICMP = 1

ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8
ICMP_TIME_EXCEEDED = 11
ICMP_ROUTER_ID = 200
ROUTER_ID_QUERY = 0
ROUTER_ID_REPLY = 1

MAX_FRAME_IP_LEN = 1500
BROADCAST_MAC = "ff:ff:ff:ff:ff:ff"

_ETH = struct.Struct("!6s6sH")
_IPV4 = struct.Struct("!BBHHHBBH4s4s")
_ICMP_ECHO = struct.Struct("!BBHHH")
_ARP = struct.Struct("!HHBBH6s4s6s4s")


class FrameError(Exception):
    pass


class MalformedFrame(FrameError):
    """Frame is shorter than its own headers declare."""


class PayloadTooLarge(FrameError):
    pass


class ReplyKind(Enum):
    ECHO_REPLY = "echo_reply"
    TIME_EXCEEDED = "time_exceeded"
    ROUTER_ID_REPLY = "router_id_reply"
    OTHER = "other"


@dataclass
class EchoProbe:
    src_ip: str
    dst_ip: str
    src_mac: str
    dst_mac: str
    icmp_id: int
    icmp_seq: int
    payload: bytes = b""
    ttl: int = 64


@dataclass
class ParsedReply:
    kind: ReplyKind
    responder_ip: str = ""
    icmp_id: int = 0
    icmp_seq: int = 0
    payload: bytes = b""


@dataclass
class RouterIdentity:
    asn: int
    ident: str

    def __post_init__(self):
        if not 0 <= self.asn <= 0xFFFFFFFF:
            raise ValueError("asn %r does not fit 32 bits" % (self.asn,))
        raw = self.ident.encode("utf-8")
        if not 1 <= len(raw) <= 64:
            raise ValueError("ident must encode to 1..64 bytes")


def internet_checksum(data):
    """RFC 1071 ones-complement sum over 16-bit words, returned already
    complemented and ready to insert.  An odd trailing byte is padded with
    zero; empty input yields 0xFFFF."""
    total = 0
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def mac_to_bytes(mac):
    parts = mac.split(":")
    if len(parts) != 6:
        raise ValueError("bad MAC address %r" % (mac,))
    return bytes(int(p, 16) for p in parts)


def mac_from_bytes(raw):
    return ":".join("%02x" % b for b in raw)


def _ip_to_bytes(ip):
    return socket.inet_aton(ip)


def _ip_from_bytes(raw):
    return socket.inet_ntoa(raw)


def _ethernet(dst_mac, src_mac, eth_type, payload):
    return _ETH.pack(mac_to_bytes(dst_mac), mac_to_bytes(src_mac), eth_type) + payload


def _ipv4_header(src_ip, dst_ip, payload_len, ttl, proto=IP_PROTO_ICMP):
    total = 20 + payload_len
    head = _IPV4.pack(0x45, 0, total, 0, 0, ttl, proto, 0,
                      _ip_to_bytes(src_ip), _ip_to_bytes(dst_ip))
    csum = internet_checksum(head)
    return head[:10] + struct.pack("!H", csum) + head[12:]


def _icmp(icmp_type, code, rest):
    head = struct.pack("!BB", icmp_type, code) + b"\x00\x00" + rest
    csum = internet_checksum(head)
    return head[:2] + struct.pack("!H", csum) + head[4:]


def build_echo_request(probe):
    """ICMP Echo Request frame for one probe.  Raises PayloadTooLarge when
    the IP datagram would not fit a 1500-byte MTU."""
    if 20 + 8 + len(probe.payload) > MAX_FRAME_IP_LEN:
        raise PayloadTooLarge("payload of %d bytes exceeds the MTU"
                              % len(probe.payload))
    rest = struct.pack("!HH", probe.icmp_id, probe.icmp_seq) + bytes(probe.payload)
    icmp = _icmp(ICMP_ECHO_REQUEST, 0, rest)
    ip = _ipv4_header(probe.src_ip, probe.dst_ip, len(icmp), probe.ttl)
    return _ethernet(probe.dst_mac, probe.src_mac, ETH_TYPE_IPV4, ip + icmp)


def build_gratuitous_arp(ip, mac):
    """Gratuitous ARP reply announcing ip at mac to the broadcast domain."""
    body = _ARP.pack(1, ETH_TYPE_IPV4, 6, 4, 2,
                     mac_to_bytes(mac), _ip_to_bytes(ip),
                     mac_to_bytes(mac), _ip_to_bytes(ip))
    return _ethernet(BROADCAST_MAC, mac, ETH_TYPE_ARP, body)


def build_router_id_query(src_ip, dst_ip, src_mac, dst_mac, icmp_id=0,
                          icmp_seq=0, ttl=64):
    rest = struct.pack("!HH", icmp_id, icmp_seq)
    icmp = _icmp(ICMP_ROUTER_ID, ROUTER_ID_QUERY, rest)
    ip = _ipv4_header(src_ip, dst_ip, len(icmp), ttl)
    return _ethernet(dst_mac, src_mac, ETH_TYPE_IPV4, ip + icmp)


def encode_router_identity(identity):
    raw = identity.ident.encode("utf-8")
    return struct.pack("!IB", identity.asn, len(raw)) + raw


def decode_router_identity(payload):
    """Inverse of encode_router_identity; None when the bytes do not parse."""
    if len(payload) < 5:
        return None
    asn, ident_len = struct.unpack_from("!IB", payload)
    if ident_len == 0 or len(payload) != 5 + ident_len:
        return None
    try:
        ident = payload[5:].decode("utf-8")
    except UnicodeDecodeError:
        return None
    return RouterIdentity(asn, ident)


def _parse_ipv4(frame):
    """Split one IPv4-over-Ethernet frame into header fields and payload.

    Returns None for non-IPv4 ethertypes and for frames whose IP options,
    checksum or version mark them as something this platform never emits.
    Raises MalformedFrame when the buffer is shorter than the declared
    lengths."""
    if len(frame) < 14:
        raise MalformedFrame("frame shorter than an Ethernet header")
    dst, src, eth_type = _ETH.unpack_from(frame)
    if eth_type != ETH_TYPE_IPV4:
        return None
    if len(frame) < 34:
        raise MalformedFrame("frame shorter than an IPv4 header")
    (ver_ihl, _tos, total_len, _ident, _frag, ttl, proto, _csum,
     src_ip, dst_ip) = _IPV4.unpack_from(frame, 14)
    if ver_ihl != 0x45:
        return None
    if total_len < 20 or len(frame) < 14 + total_len:
        raise MalformedFrame("IPv4 total length exceeds the frame")
    if internet_checksum(frame[14:34]) != 0:
        return None
    return {
        "eth_dst": mac_from_bytes(dst),
        "eth_src": mac_from_bytes(src),
        "src_ip": _ip_from_bytes(src_ip),
        "dst_ip": _ip_from_bytes(dst_ip),
        "ttl": ttl,
        "proto": proto,
        "ip_payload": frame[34:14 + total_len],
    }


def parse_reply(frame):
    """Classify a dataplane frame handed up by the switch.

    Unknown, non-ICMP and checksum-damaged frames come back as OTHER;
    frames shorter than their declared headers raise MalformedFrame.
    """
    parsed = _parse_ipv4(frame)
    if parsed is None:
        return ParsedReply(ReplyKind.OTHER)
    if parsed["proto"] != IP_PROTO_ICMP:
        return ParsedReply(ReplyKind.OTHER)
    icmp = parsed["ip_payload"]
    if len(icmp) < 8:
        raise MalformedFrame("ICMP message shorter than its header")
    if internet_checksum(icmp) != 0:
        return ParsedReply(ReplyKind.OTHER)
    icmp_type, code, _csum, ident, seq = _ICMP_ECHO.unpack_from(icmp)
    responder = parsed["src_ip"]
    if icmp_type == ICMP_ECHO_REPLY and code == 0:
        return ParsedReply(ReplyKind.ECHO_REPLY, responder, ident, seq, icmp[8:])
    if icmp_type == ICMP_TIME_EXCEEDED and code == 0:
        quote = icmp[8:]
        if len(quote) < 28 or quote[0] != 0x45 or quote[9] != IP_PROTO_ICMP:
            return ParsedReply(ReplyKind.OTHER)
        inner_id, inner_seq = struct.unpack_from("!HH", quote, 24)
        return ParsedReply(ReplyKind.TIME_EXCEEDED, responder, inner_id,
                           inner_seq, quote)
    if icmp_type == ICMP_ROUTER_ID and code == ROUTER_ID_REPLY:
        return ParsedReply(ReplyKind.ROUTER_ID_REPLY, responder, ident, seq,
                           icmp[8:])
    return ParsedReply(ReplyKind.OTHER)


def parse_router_id_query(frame):
    """Return (querier_ip, icmp_id, icmp_seq) if the frame is a well-formed
    identity query, else None."""
    try:
        parsed = _parse_ipv4(frame)
    except MalformedFrame:
        return None
    if parsed is None or parsed["proto"] != IP_PROTO_ICMP:
        return None
    icmp = parsed["ip_payload"]
    if len(icmp) < 8 or internet_checksum(icmp) != 0:
        return None
    icmp_type, code, _csum, ident, seq = _ICMP_ECHO.unpack_from(icmp)
    if icmp_type != ICMP_ROUTER_ID or code != ROUTER_ID_QUERY:
        return None
    return parsed["src_ip"], ident, seq


def build_router_id_reply(query_frame, identity, ttl=64):
    """Answer an identity query, mirroring its addressing back at the
    querier."""
    parsed = _parse_ipv4(query_frame)
    if parsed is None:
        raise MalformedFrame("identity query is not IPv4")
    icmp = parsed["ip_payload"]
    if len(icmp) < 8:
        raise MalformedFrame("identity query ICMP header incomplete")
    _t, _c, _csum, ident, seq = _ICMP_ECHO.unpack_from(icmp)
    rest = struct.pack("!HH", ident, seq) + encode_router_identity(identity)
    out_icmp = _icmp(ICMP_ROUTER_ID, ROUTER_ID_REPLY, rest)
    ip = _ipv4_header(parsed["dst_ip"], parsed["src_ip"], len(out_icmp), ttl)
    return _ethernet(parsed["eth_src"], parsed["eth_dst"], ETH_TYPE_IPV4,
                     ip + out_icmp)


def build_echo_reply(request_frame, ttl=64):
    """Loop an Echo Request back as the matching Echo Reply (used by the
    simulated targets)."""
    parsed = _parse_ipv4(request_frame)
    if parsed is None:
        raise MalformedFrame("echo request is not IPv4")
    icmp = parsed["ip_payload"]
    if len(icmp) < 8:
        raise MalformedFrame("echo request ICMP header incomplete")
    out_icmp = _icmp(ICMP_ECHO_REPLY, 0, icmp[4:])
    ip = _ipv4_header(parsed["dst_ip"], parsed["src_ip"], len(out_icmp), ttl)
    return _ethernet(parsed["eth_src"], parsed["eth_dst"], ETH_TYPE_IPV4,
                     ip + out_icmp)


def build_time_exceeded(router_ip, original_frame, ttl=64):
    """ICMP Time Exceeded quoting the expired probe: inner IPv4 header plus
    the first 8 payload bytes, per the classic traceroute contract."""
    parsed = _parse_ipv4(original_frame)
    if parsed is None:
        raise MalformedFrame("expired frame is not IPv4")
    quote = original_frame[14:34] + parsed["ip_payload"][:8]
    out_icmp = _icmp(ICMP_TIME_EXCEEDED, 0, b"\x00\x00\x00\x00" + quote)
    ip = _ipv4_header(router_ip, parsed["src_ip"], len(out_icmp), ttl)
    return _ethernet(parsed["eth_src"], parsed["eth_dst"], ETH_TYPE_IPV4,
                     ip + out_icmp)


def parse_icmp(frame):
    """Loose ICMP view of a frame for dataplane emulation: header fields
    plus id/seq words, or None when the frame is not well-formed ICMPv4."""
    try:
        parsed = _parse_ipv4(frame)
    except MalformedFrame:
        return None
    if parsed is None or parsed["proto"] != IP_PROTO_ICMP:
        return None
    icmp = parsed["ip_payload"]
    if len(icmp) < 8:
        return None
    icmp_type, code, _csum, ident, seq = _ICMP_ECHO.unpack_from(icmp)
    return {
        "src_ip": parsed["src_ip"],
        "dst_ip": parsed["dst_ip"],
        "ttl": parsed["ttl"],
        "icmp_type": icmp_type,
        "icmp_code": code,
        "icmp_id": ident,
        "icmp_seq": seq,
        "payload": icmp[8:],
    }


def match_fields(frame):
    """Extract the header fields a flow table can match on.  Missing layers
    simply leave keys out; garbage yields an empty dict."""
    out = {}
    if len(frame) < 14:
        return out
    eth_type = struct.unpack_from("!H", frame, 12)[0]
    out["eth_type"] = eth_type
    if eth_type != ETH_TYPE_IPV4 or len(frame) < 34:
        return out
    if frame[14] != 0x45:
        return out
    out["ip_proto"] = frame[23]
    out["ipv4_dst"] = _ip_from_bytes(frame[30:34])
    if out["ip_proto"] == IP_PROTO_ICMP and len(frame) >= 36:
        out["icmpv4_type"] = frame[34]
        out["icmpv4_code"] = frame[35]
    return out
