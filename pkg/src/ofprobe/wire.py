"""OpenFlow 1.3 wire codec for the message subset the platform exchanges.

Everything is big-endian.  Eight message kinds are understood: HELLO,
ECHO_REQUEST, ECHO_REPLY, FEATURES_REQUEST, FEATURES_REPLY, PACKET_IN,
PACKET_OUT and FLOW_MOD.  Any other type decodes to an UnsupportedType
error that still reports the byte length, so a stream reader can skip the
message and stay in sync.
"""

import socket
import struct
from dataclasses import dataclass, field

OFP_VERSION = 0x04
HEADER_LEN = 8
MAX_MESSAGE_LEN = 0xFFFF

OFPT_HELLO = 0
OFPT_ECHO_REQUEST = 2
OFPT_ECHO_REPLY = 3
OFPT_FEATURES_REQUEST = 5
OFPT_FEATURES_REPLY = 6
OFPT_PACKET_IN = 10
OFPT_PACKET_OUT = 13
OFPT_FLOW_MOD = 14

SUPPORTED_TYPES = frozenset((
    OFPT_HELLO, OFPT_ECHO_REQUEST, OFPT_ECHO_REPLY, OFPT_FEATURES_REQUEST,
    OFPT_FEATURES_REPLY, OFPT_PACKET_IN, OFPT_PACKET_OUT, OFPT_FLOW_MOD,
))

NO_BUFFER = 0xFFFFFFFF
PORT_CONTROLLER = 0xFFFFFFFD
PORT_ANY = 0xFFFFFFFF
GROUP_ANY = 0xFFFFFFFF
CTRL_MAX_LEN_NO_BUFFER = 0xFFFF

REASON_NO_MATCH = 0
REASON_ACTION = 1

OFPFC_ADD = 0
_OXM_CLASS_BASIC = 0x8000
_ACTION_OUTPUT = 0
_INSTR_APPLY_ACTIONS = 4
_MATCH_TYPE_OXM = 1

_HEADER = struct.Struct("!BBHI")
_FEATURES_BODY = struct.Struct("!QIBB2xII")
_PACKET_IN_FIXED = struct.Struct("!IHBBQ")
_PACKET_OUT_FIXED = struct.Struct("!IIH6x")
_FLOW_MOD_FIXED = struct.Struct("!QQBBHHHIIIH2x")
_ACTION_OUTPUT_STRUCT = struct.Struct("!HHIH6x")
_OXM_HEADER = struct.Struct("!HBB")
_INSTR_HEADER = struct.Struct("!HH4x")


class WireError(Exception):
    """Base class for codec failures."""


class UnencodableMessage(WireError):
    pass


class TruncatedMessage(WireError):
    pass


class BadVersion(WireError):
    def __init__(self, version):
        super().__init__("unsupported OpenFlow version 0x%02x" % version)
        self.version = version


class UnsupportedType(WireError):
    """Raised for parseable messages the codec does not model.  ``consumed``
    carries the full message length so callers can skip it."""

    def __init__(self, msg_type, consumed):
        super().__init__("unsupported OpenFlow message type %d" % msg_type)
        self.msg_type = msg_type
        self.consumed = consumed


def ip_to_bytes(ip):
    try:
        return socket.inet_aton(ip)
    except OSError:
        raise UnencodableMessage("bad IPv4 address %r" % (ip,))


def ip_from_bytes(raw):
    return socket.inet_ntoa(raw)


# Match fields the codec understands: name -> (oxm field id, byte length).
_MATCH_FIELDS = {
    "in_port": (0, 4),
    "eth_type": (5, 2),
    "ip_proto": (10, 1),
    "ipv4_dst": (12, 4),
    "icmpv4_type": (19, 1),
    "icmpv4_code": (20, 1),
}
_FIELD_BY_ID = {fid: (name, length) for name, (fid, length) in _MATCH_FIELDS.items()}


def _encode_match_value(name, value):
    fid, length = _MATCH_FIELDS[name]
    if name == "ipv4_dst":
        raw = ip_to_bytes(value)
    else:
        if not isinstance(value, int) or value < 0 or value >= (1 << (8 * length)):
            raise UnencodableMessage("match %s=%r out of range" % (name, value))
        raw = value.to_bytes(length, "big")
    return _OXM_HEADER.pack(_OXM_CLASS_BASIC, fid << 1, length) + raw


def _decode_oxm_list(raw):
    """Yield (name, value) pairs; unknown fields yield (None, None)."""
    pos = 0
    out = []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise TruncatedMessage("OXM header runs past match")
        klass, fh, length = _OXM_HEADER.unpack_from(raw, pos)
        pos += 4
        if pos + length > len(raw):
            raise TruncatedMessage("OXM value runs past match")
        payload = raw[pos:pos + length]
        pos += length
        if klass != _OXM_CLASS_BASIC or fh & 1:
            out.append((None, None))
            continue
        entry = _FIELD_BY_ID.get(fh >> 1)
        if entry is None or entry[1] != length:
            out.append((None, None))
            continue
        name = entry[0]
        if name == "ipv4_dst":
            out.append((name, ip_from_bytes(payload)))
        else:
            out.append((name, int.from_bytes(payload, "big")))
    return out


def _encode_match(fields):
    oxms = b"".join(_encode_match_value(name, value) for name, value in fields)
    length = 4 + len(oxms)
    pad = (-length) % 8
    return struct.pack("!HH", _MATCH_TYPE_OXM, length) + oxms + b"\x00" * pad


def _decode_match(raw, pos):
    """Return (pairs, end_of_padded_match)."""
    if pos + 4 > len(raw):
        raise TruncatedMessage("match header missing")
    mtype, mlen = struct.unpack_from("!HH", raw, pos)
    if mtype != _MATCH_TYPE_OXM or mlen < 4:
        raise TruncatedMessage("malformed match header")
    end = pos + mlen
    if end > len(raw):
        raise TruncatedMessage("match runs past message")
    pairs = _decode_oxm_list(raw[pos + 4:end])
    return pairs, pos + mlen + ((-mlen) % 8)


@dataclass
class OutputAction:
    port: int
    max_len: int = CTRL_MAX_LEN_NO_BUFFER


@dataclass
class FeaturesReplyBody:
    datapath_id: int
    n_buffers: int = 0
    n_tables: int = 254
    auxiliary_id: int = 0
    capabilities: int = 0
    reserved: int = 0


@dataclass
class PacketOutBody:
    in_port: int
    actions: list
    frame: bytes
    buffer_id: int = NO_BUFFER


@dataclass
class PacketInBody:
    buffer_id: int
    total_len: int
    reason: int
    table_id: int
    cookie: int
    in_port: int
    frame: bytes


@dataclass
class FlowModBody:
    cookie: int
    priority: int
    match: list
    out_port: int = PORT_CONTROLLER
    max_len: int = CTRL_MAX_LEN_NO_BUFFER

    def __post_init__(self):
        seen = set()
        for name, _value in self.match:
            if name not in _MATCH_FIELDS or name == "in_port":
                raise ValueError("unsupported flow match field %r" % (name,))
            if name in seen:
                raise ValueError("duplicate flow match field %r" % (name,))
            seen.add(name)


@dataclass
class OpenFlowMessage:
    msg_type: int
    xid: int
    body: object = b""
    version: int = OFP_VERSION


def hello(xid):
    return OpenFlowMessage(OFPT_HELLO, xid)


def echo_request(xid, data=b""):
    return OpenFlowMessage(OFPT_ECHO_REQUEST, xid, bytes(data))


def echo_reply(xid, data=b""):
    return OpenFlowMessage(OFPT_ECHO_REPLY, xid, bytes(data))


def features_request(xid):
    return OpenFlowMessage(OFPT_FEATURES_REQUEST, xid)


def features_reply(xid, datapath_id, **kwargs):
    return OpenFlowMessage(OFPT_FEATURES_REPLY, xid,
                           FeaturesReplyBody(datapath_id, **kwargs))


def packet_out(xid, out_port, frame, in_port=PORT_CONTROLLER):
    body = PacketOutBody(in_port=in_port, actions=[OutputAction(out_port)],
                         frame=bytes(frame))
    return OpenFlowMessage(OFPT_PACKET_OUT, xid, body)


def packet_in(xid, in_port, frame, reason=REASON_ACTION, table_id=0,
              cookie=0, total_len=None):
    body = PacketInBody(buffer_id=NO_BUFFER,
                        total_len=len(frame) if total_len is None else total_len,
                        reason=reason, table_id=table_id, cookie=cookie,
                        in_port=in_port, frame=bytes(frame))
    return OpenFlowMessage(OFPT_PACKET_IN, xid, body)


def flow_mod(xid, priority, match, cookie=0):
    return OpenFlowMessage(OFPT_FLOW_MOD, xid,
                           FlowModBody(cookie=cookie, priority=priority,
                                       match=list(match)))


def _check_u(value, bits, what):
    if not isinstance(value, int) or value < 0 or value >= (1 << bits):
        raise UnencodableMessage("%s=%r does not fit %d bits" % (what, value, bits))


def _encode_actions(actions):
    out = []
    for act in actions:
        if not isinstance(act, OutputAction):
            raise UnencodableMessage("only output actions can be encoded")
        _check_u(act.port, 32, "action port")
        _check_u(act.max_len, 16, "action max_len")
        out.append(_ACTION_OUTPUT_STRUCT.pack(_ACTION_OUTPUT, 16, act.port,
                                              act.max_len))
    return b"".join(out)


def _decode_actions(raw):
    actions = []
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise TruncatedMessage("action header runs past body")
        atype, alen = struct.unpack_from("!HH", raw, pos)
        if alen < 8 or pos + alen > len(raw):
            raise TruncatedMessage("action length runs past body")
        if atype != _ACTION_OUTPUT or alen != 16:
            return None
        _t, _l, port, max_len = _ACTION_OUTPUT_STRUCT.unpack_from(raw, pos)
        actions.append(OutputAction(port, max_len))
        pos += alen
    return actions


def encode_message(msg):
    """Serialize an OpenFlowMessage to wire bytes."""
    if msg.version != OFP_VERSION:
        raise UnencodableMessage("cannot encode version 0x%02x" % msg.version)
    _check_u(msg.xid, 32, "xid")
    t = msg.msg_type
    body = msg.body
    if t in (OFPT_HELLO, OFPT_ECHO_REQUEST, OFPT_ECHO_REPLY, OFPT_FEATURES_REQUEST):
        if not isinstance(body, (bytes, bytearray)):
            raise UnencodableMessage("message type %d takes a bytes body" % t)
        payload = bytes(body)
    elif t == OFPT_FEATURES_REPLY:
        _check_u(body.datapath_id, 64, "datapath_id")
        _check_u(body.n_buffers, 32, "n_buffers")
        _check_u(body.n_tables, 8, "n_tables")
        _check_u(body.auxiliary_id, 8, "auxiliary_id")
        _check_u(body.capabilities, 32, "capabilities")
        _check_u(body.reserved, 32, "reserved")
        payload = _FEATURES_BODY.pack(body.datapath_id, body.n_buffers,
                                      body.n_tables, body.auxiliary_id,
                                      body.capabilities, body.reserved)
    elif t == OFPT_PACKET_OUT:
        _check_u(body.buffer_id, 32, "buffer_id")
        _check_u(body.in_port, 32, "in_port")
        actions = _encode_actions(body.actions)
        payload = (_PACKET_OUT_FIXED.pack(body.buffer_id, body.in_port,
                                          len(actions))
                   + actions + bytes(body.frame))
    elif t == OFPT_PACKET_IN:
        _check_u(body.buffer_id, 32, "buffer_id")
        _check_u(body.total_len, 16, "total_len")
        _check_u(body.reason, 8, "reason")
        _check_u(body.table_id, 8, "table_id")
        _check_u(body.cookie, 64, "cookie")
        _check_u(body.in_port, 32, "in_port")
        match = _encode_match([("in_port", body.in_port)])
        payload = (_PACKET_IN_FIXED.pack(body.buffer_id, body.total_len,
                                         body.reason, body.table_id,
                                         body.cookie)
                   + match + b"\x00\x00" + bytes(body.frame))
    elif t == OFPT_FLOW_MOD:
        _check_u(body.cookie, 64, "cookie")
        _check_u(body.priority, 16, "priority")
        _check_u(body.out_port, 32, "out_port")
        match = _encode_match(body.match)
        actions = _encode_actions([OutputAction(body.out_port, body.max_len)])
        instr = _INSTR_HEADER.pack(_INSTR_APPLY_ACTIONS, 8 + len(actions)) + actions
        payload = (_FLOW_MOD_FIXED.pack(body.cookie, 0, 0, OFPFC_ADD, 0, 0,
                                        body.priority, NO_BUFFER, PORT_ANY,
                                        GROUP_ANY, 0)
                   + match + instr)
    else:
        raise UnencodableMessage("cannot encode message type %d" % t)
    total = HEADER_LEN + len(payload)
    if total > MAX_MESSAGE_LEN:
        raise UnencodableMessage("message length %d exceeds 16-bit limit" % total)
    return _HEADER.pack(OFP_VERSION, t, total, msg.xid) + payload


def _decode_packet_in(raw, xid):
    if len(raw) < HEADER_LEN + _PACKET_IN_FIXED.size:
        raise TruncatedMessage("packet_in body too short")
    buffer_id, total_len, reason, table_id, cookie = \
        _PACKET_IN_FIXED.unpack_from(raw, HEADER_LEN)
    pairs, pos = _decode_match(raw, HEADER_LEN + _PACKET_IN_FIXED.size)
    in_port = None
    for name, value in pairs:
        if name == "in_port":
            in_port = value
    if in_port is None:
        raise UnsupportedType(OFPT_PACKET_IN, len(raw))
    if pos + 2 > len(raw):
        raise TruncatedMessage("packet_in pad missing")
    frame = raw[pos + 2:]
    body = PacketInBody(buffer_id, total_len, reason, table_id, cookie,
                        in_port, frame)
    return OpenFlowMessage(OFPT_PACKET_IN, xid, body)


def _decode_packet_out(raw, xid):
    if len(raw) < HEADER_LEN + _PACKET_OUT_FIXED.size:
        raise TruncatedMessage("packet_out body too short")
    buffer_id, in_port, actions_len = _PACKET_OUT_FIXED.unpack_from(raw, HEADER_LEN)
    pos = HEADER_LEN + _PACKET_OUT_FIXED.size
    if pos + actions_len > len(raw):
        raise TruncatedMessage("packet_out actions run past message")
    actions = _decode_actions(raw[pos:pos + actions_len])
    if actions is None:
        raise UnsupportedType(OFPT_PACKET_OUT, len(raw))
    frame = raw[pos + actions_len:]
    body = PacketOutBody(in_port=in_port, actions=actions, frame=frame,
                         buffer_id=buffer_id)
    return OpenFlowMessage(OFPT_PACKET_OUT, xid, body)


def _decode_flow_mod(raw, xid):
    if len(raw) < HEADER_LEN + _FLOW_MOD_FIXED.size:
        raise TruncatedMessage("flow_mod body too short")
    (cookie, _cmask, _table, command, _idle, _hard, priority, _buf,
     _out_port, _out_group, _flags) = _FLOW_MOD_FIXED.unpack_from(raw, HEADER_LEN)
    if command != OFPFC_ADD:
        raise UnsupportedType(OFPT_FLOW_MOD, len(raw))
    pairs, pos = _decode_match(raw, HEADER_LEN + _FLOW_MOD_FIXED.size)
    match = []
    for name, value in pairs:
        if name is None or name == "in_port":
            raise UnsupportedType(OFPT_FLOW_MOD, len(raw))
        match.append((name, value))
    if pos + _INSTR_HEADER.size > len(raw):
        raise TruncatedMessage("flow_mod instruction missing")
    itype, ilen = struct.unpack_from("!HH", raw, pos)
    if itype != _INSTR_APPLY_ACTIONS or pos + ilen != len(raw):
        raise UnsupportedType(OFPT_FLOW_MOD, len(raw))
    actions = _decode_actions(raw[pos + _INSTR_HEADER.size:])
    if actions is None or len(actions) != 1:
        raise UnsupportedType(OFPT_FLOW_MOD, len(raw))
    body = FlowModBody(cookie=cookie, priority=priority, match=match,
                       out_port=actions[0].port, max_len=actions[0].max_len)
    return OpenFlowMessage(OFPT_FLOW_MOD, xid, body)


def decode_message(data):
    """Decode one message from the head of ``data``.

    Returns (OpenFlowMessage, consumed).  Raises TruncatedMessage when more
    bytes are needed, BadVersion on a foreign version byte, and
    UnsupportedType (with the skippable length) for types outside the
    supported subset.
    """
    if len(data) < HEADER_LEN:
        raise TruncatedMessage("%d header bytes missing" % (HEADER_LEN - len(data)))
    version, msg_type, length, xid = _HEADER.unpack_from(data)
    if version != OFP_VERSION:
        raise BadVersion(version)
    if length < HEADER_LEN:
        raise BadVersion(version)
    if len(data) < length:
        raise TruncatedMessage("message needs %d bytes, have %d"
                               % (length, len(data)))
    raw = bytes(data[:length])
    if msg_type not in SUPPORTED_TYPES:
        raise UnsupportedType(msg_type, length)
    if msg_type in (OFPT_HELLO, OFPT_ECHO_REQUEST, OFPT_ECHO_REPLY,
                    OFPT_FEATURES_REQUEST):
        msg = OpenFlowMessage(msg_type, xid, raw[HEADER_LEN:])
    elif msg_type == OFPT_FEATURES_REPLY:
        if length < HEADER_LEN + _FEATURES_BODY.size:
            raise TruncatedMessage("features_reply body too short")
        dpid, n_buffers, n_tables, aux, caps, reserved = \
            _FEATURES_BODY.unpack_from(raw, HEADER_LEN)
        msg = OpenFlowMessage(msg_type, xid,
                              FeaturesReplyBody(dpid, n_buffers, n_tables,
                                                aux, caps, reserved))
    elif msg_type == OFPT_PACKET_IN:
        msg = _decode_packet_in(raw, xid)
    elif msg_type == OFPT_PACKET_OUT:
        msg = _decode_packet_out(raw, xid)
    else:
        msg = _decode_flow_mod(raw, xid)
    return msg, length


class MessageStream:
    """Reassembles OpenFlow messages from an arbitrarily chunked byte feed.

    TCP gives no message framing: a segment may carry many messages and the
    last one may be cut anywhere.  feed() returns every complete message,
    keeps the partial tail buffered, silently skips unsupported types
    (counting them), and lets BadVersion escape so the session can abort.
    """

    def __init__(self):
        self._buf = bytearray()
        self.skipped = 0

    def pending(self):
        return len(self._buf)

    def feed(self, data):
        self._buf += data
        out = []
        while self._buf:
            try:
                msg, consumed = decode_message(self._buf)
            except TruncatedMessage:
                break
            except UnsupportedType as exc:
                self.skipped += 1
                del self._buf[:exc.consumed]
                continue
            out.append(msg)
            del self._buf[:consumed]
        return out
