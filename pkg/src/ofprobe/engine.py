"""Measurement core: probe tasks, reply correlation and RTT correction.

A probe's controller-to-target round trip includes the control channel and
the switch's processing on both legs.  The engine keeps a smoothed estimate
of the controller-to-switch round trip (refreshed with an OpenFlow echo at
the start of every task) and subtracts the snapshot taken at task start
from each raw sample, clamping at zero:

    rtt = max(0, (t_in - t_out) - rtt_cs)

ICMP identifiers are allocated from a single 16-bit space shared by every
task kind, so a reply's (id, seq) pair is unambiguous engine-wide.  Ids are
only recycled by an explicit clear; exhausting the space fails new tasks
with StateFull until then.
"""

import logging
from dataclasses import dataclass, field

from . import frames
from .eventloop import Future
from .frames import EchoProbe, ReplyKind
from .session import ACTIVE

log = logging.getLogger(__name__)

MAX_TTL = 30
ID_SPACE = 65536

TERMINATED_DESTINATION = "destination_reached"
TERMINATED_MAX_TTL = "max_ttl"
TERMINATED_IN_PROGRESS = "in_progress"


class StateFull(Exception):
    """Every ICMP identifier is in use; dump and clear to recover."""


class NoActiveSession(Exception):
    pass


class NegativeSample(ValueError):
    pass


class RttEstimator:
    """Exponentially weighted moving average over RTT samples.

    The first sample becomes the estimate; each later one folds in as
    current = alpha * sample + (1 - alpha) * current.  alpha = 1 degenerates
    to always trusting the newest sample, which tolerates isolated spikes
    poorly but is sometimes useful for debugging.
    """

    def __init__(self, alpha: float = 0.5):
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        self.alpha = alpha
        self.current = None
        self.sample_count = 0

    def update(self, sample_us) -> float:
        if sample_us < 0:
            raise NegativeSample("negative RTT sample %r" % (sample_us,))
        if self.current is None:
            self.current = float(sample_us)
        else:
            self.current = self.alpha * sample_us + (1.0 - self.alpha) * self.current
        self.sample_count += 1
        return self.current


class IdAllocator:
    """16-bit ICMP identifier pool.  Allocation walks forward from the last
    issued id (wrapping), so consecutive tasks get distinct ids even after
    frees."""

    def __init__(self):
        self._next = 0
        self._in_use = set()

    @property
    def in_use(self):
        return len(self._in_use)

    def allocate(self) -> int:
        if len(self._in_use) >= ID_SPACE:
            raise StateFull("all %d ICMP identifiers in use" % ID_SPACE)
        while self._next in self._in_use:
            self._next = (self._next + 1) % ID_SPACE
        out = self._next
        self._in_use.add(out)
        self._next = (self._next + 1) % ID_SPACE
        return out

    def release(self, icmp_id):
        self._in_use.discard(icmp_id)


def estimate_rtt(record, rtt_cs_us):
    """Corrected RTT for one probe record, or None while unanswered."""
    if record.t_in is None:
        return None
    return max(0.0, (record.t_in - record.t_out) - rtt_cs_us)


@dataclass
class ProbeRecord:
    icmp_seq: int
    ttl: int
    t_out: int
    t_in: int = None
    responder: str = None
    expired: bool = False
    timer: object = None

    @property
    def resolved(self):
        return self.t_in is not None or self.expired


@dataclass
class PingTask:
    icmp_id: int
    target: str
    num: int
    payload: bytes
    out_port: int
    gap_us: int
    rtt_cs_at_start: float = None
    records: dict = field(default_factory=dict)
    cleared: bool = False

    @property
    def done(self):
        return (len(self.records) == self.num
                and all(r.resolved for r in self.records.values()))


@dataclass
class TracerouteTask:
    icmp_id: int
    target: str
    probes_per_ttl: int
    out_port: int
    gap_us: int
    rtt_cs_at_start: float = None
    records: dict = field(default_factory=dict)
    dest_ttl: int = None
    emitted_all: bool = False
    cleared: bool = False

    @property
    def terminated(self):
        if self.dest_ttl is not None:
            return TERMINATED_DESTINATION
        if self.emitted_all and all(r.resolved for r in self.records.values()):
            return TERMINATED_MAX_TTL
        return TERMINATED_IN_PROGRESS

    @property
    def done(self):
        return self.terminated != TERMINATED_IN_PROGRESS


@dataclass
class ProbeSettings:
    src_ip: str = "10.0.0.100"
    src_mac: str = "02:00:00:00:00:64"
    next_hop_mac: str = "02:00:00:00:00:01"
    out_port: int = 1
    default_ttl: int = 64
    ewma_alpha: float = 0.5
    probe_timeout_us: int = 3_000_000
    probe_gap_us: int = 0
    max_probes_per_task: int = 65535
    flow_priority: int = 100


class MeasurementEngine:
    """Owns tasks, the id space, the RTT estimator and the reply router."""

    def __init__(self, loop, settings=None):
        self.loop = loop
        self.settings = settings or ProbeSettings()
        self.estimator = RttEstimator(self.settings.ewma_alpha)
        self.allocator = IdAllocator()
        self.pings = {}
        self.traceroutes = {}
        self.router_identity = None
        self.router_id_serve = False
        self.counters = {
            "duplicate_replies": 0,
            "late_replies": 0,
            "unknown_replies": 0,
            "malformed_frames": 0,
            "other_frames": 0,
            "echo_timeouts": 0,
            "router_id_served": 0,
        }
        self._session = None
        self._pending_rid_queries = {}
        self._primed_ports = set()

    # -- session wiring -----------------------------------------------------

    def attach_session(self, session):
        """Adopt an active switch session: steer replies here and take over
        its PacketIn feed.  The engine drives one switch at a time; a newer
        session replaces the old one."""
        session.packet_in_handler = self._on_packet_in
        session.close_handler = self._on_session_closed
        session.install_reply_flows(self.settings.src_ip,
                                    self.settings.flow_priority)
        self._session = session
        # a new switch means cold upstream ARP caches
        self._primed_ports = set()
        self._prime_port(session, self.settings.out_port)

    def _prime_port(self, session, port):
        """Announce our address out one port so the reply path resolves
        before the first probe.  Once per port per session: re-announcing
        ahead of every task would queue the ARP in front of the probe and
        skew its emission time."""
        arp = frames.build_gratuitous_arp(self.settings.src_ip,
                                          self.settings.src_mac)
        session.send_probe(port, arp)
        self._primed_ports.add(port)

    def _on_session_closed(self, session, exc):
        if self._session is session:
            self._session = None

    @property
    def session(self):
        return self._session

    def session_active(self):
        return self._session is not None and self._session.state == ACTIVE

    def _require_session(self):
        if not self.session_active():
            raise NoActiveSession("no active switch session")
        return self._session

    # -- task startup ---------------------------------------------------------

    def start_ping(self, target, num, payload=b"", out_port=None,
                   gap_us=None) -> int:
        """Allocate an id and begin a ping task.  Probes flow only after a
        fresh control-channel RTT sample."""
        if not 1 <= num <= self.settings.max_probes_per_task:
            raise ValueError("num must be in 1..%d"
                             % self.settings.max_probes_per_task)
        session = self._require_session()
        icmp_id = self.allocator.allocate()
        task = PingTask(icmp_id=icmp_id, target=target, num=num,
                        payload=bytes(payload),
                        out_port=self.settings.out_port if out_port is None
                        else out_port,
                        gap_us=self.settings.probe_gap_us if gap_us is None
                        else gap_us)
        self.pings[icmp_id] = task
        self._begin_task(session, task, self._emit_ping_probes)
        return icmp_id

    def start_traceroute(self, target, probes_per_ttl=1, out_port=None,
                         gap_us=None) -> int:
        if probes_per_ttl < 1 or MAX_TTL * probes_per_ttl > ID_SPACE:
            raise ValueError("probes_per_ttl must be in 1..%d"
                             % (ID_SPACE // MAX_TTL))
        session = self._require_session()
        icmp_id = self.allocator.allocate()
        task = TracerouteTask(icmp_id=icmp_id, target=target,
                              probes_per_ttl=probes_per_ttl,
                              out_port=self.settings.out_port if out_port is None
                              else out_port,
                              gap_us=self.settings.probe_gap_us if gap_us is None
                              else gap_us)
        self.traceroutes[icmp_id] = task
        self._begin_task(session, task, self._emit_traceroute_probes)
        return icmp_id

    def _begin_task(self, session, task, emit):
        if task.out_port not in self._primed_ports:
            self._prime_port(session, task.out_port)
        fut = session.sample_switch_rtt()
        fut.add_done_callback(lambda f: self._after_echo(f, task, emit))

    def _after_echo(self, fut, task, emit):
        if task.cleared:
            return
        exc = fut.exception()
        if exc is None:
            self.estimator.update(fut.result())
        else:
            # Probing proceeds on the last known estimate rather than
            # stalling the task behind a lost echo.
            self.counters["echo_timeouts"] += 1
        task.rtt_cs_at_start = self.estimator.current or 0.0
        emit(task)

    # -- probe emission --------------------------------------------------------

    def _emit_ping_probes(self, task):
        for seq in range(task.num):
            if task.gap_us:
                self.loop.call_later(seq * task.gap_us,
                                     self._send_ping_probe, task, seq)
            else:
                self._send_ping_probe(task, seq)

    def _send_ping_probe(self, task, seq):
        if task.cleared or not self.session_active():
            return
        probe = EchoProbe(src_ip=self.settings.src_ip, dst_ip=task.target,
                          src_mac=self.settings.src_mac,
                          dst_mac=self.settings.next_hop_mac,
                          icmp_id=task.icmp_id, icmp_seq=seq,
                          payload=task.payload, ttl=self.settings.default_ttl)
        self._send_record(task, seq, probe, self.settings.default_ttl)

    def _emit_traceroute_probes(self, task):
        if task.gap_us:
            slot = 0
            for ttl in range(1, MAX_TTL + 1):
                for idx in range(task.probes_per_ttl):
                    self.loop.call_later(slot * task.gap_us,
                                         self._send_trace_probe, task, ttl, idx)
                    slot += 1
            # The flag must trail the last scheduled emission or a dump
            # taken mid-task would read as terminated.
            self.loop.call_later((slot - 1) * task.gap_us,
                                 setattr, task, "emitted_all", True)
        else:
            for ttl in range(1, MAX_TTL + 1):
                if task.dest_ttl is not None:
                    break
                for idx in range(task.probes_per_ttl):
                    self._send_trace_probe(task, ttl, idx)
            task.emitted_all = True

    def _send_trace_probe(self, task, ttl, idx):
        if task.cleared or task.dest_ttl is not None \
                or not self.session_active():
            return
        seq = (ttl - 1) * task.probes_per_ttl + idx
        probe = EchoProbe(src_ip=self.settings.src_ip, dst_ip=task.target,
                          src_mac=self.settings.src_mac,
                          dst_mac=self.settings.next_hop_mac,
                          icmp_id=task.icmp_id, icmp_seq=seq, ttl=ttl)
        self._send_record(task, seq, probe, ttl)

    def _send_record(self, task, seq, probe, ttl):
        frame = frames.build_echo_request(probe)
        t_out = self._session.send_probe(task.out_port, frame)
        record = ProbeRecord(icmp_seq=seq, ttl=ttl, t_out=t_out)
        record.timer = self.loop.call_later(self.settings.probe_timeout_us,
                                            self._expire_record, task, seq)
        task.records[seq] = record

    def _expire_record(self, task, seq):
        record = task.records.get(seq)
        if record is not None and not record.resolved:
            record.expired = True

    # -- reply handling -----------------------------------------------------------

    def _on_packet_in(self, frame, t_in, in_port):
        try:
            reply = frames.parse_reply(frame)
        except frames.MalformedFrame:
            self.counters["malformed_frames"] += 1
            return
        if reply.kind == ReplyKind.ECHO_REPLY:
            self._route_echo_reply(reply, t_in)
        elif reply.kind == ReplyKind.TIME_EXCEEDED:
            self._route_time_exceeded(reply, t_in)
        elif reply.kind == ReplyKind.ROUTER_ID_REPLY:
            self._route_router_id_reply(reply)
        else:
            self._handle_other(frame, in_port)

    def _route_echo_reply(self, reply, t_in):
        task = self.pings.get(reply.icmp_id)
        if task is not None:
            self._fill_record(task, reply, t_in)
            return
        task = self.traceroutes.get(reply.icmp_id)
        if task is not None:
            ttl = reply.icmp_seq // task.probes_per_ttl + 1
            if self._fill_record(task, reply, t_in):
                if task.dest_ttl is None or ttl < task.dest_ttl:
                    task.dest_ttl = ttl
            return
        self.counters["unknown_replies"] += 1

    def _route_time_exceeded(self, reply, t_in):
        task = self.traceroutes.get(reply.icmp_id)
        if task is None:
            self.counters["unknown_replies"] += 1
            return
        self._fill_record(task, reply, t_in)

    def _fill_record(self, task, reply, t_in):
        """First answer wins; duplicates and post-expiry stragglers only
        bump counters.  Returns True when the record was filled."""
        record = task.records.get(reply.icmp_seq)
        if record is None:
            self.counters["unknown_replies"] += 1
            return False
        if record.t_in is not None:
            self.counters["duplicate_replies"] += 1
            return False
        if record.expired:
            self.counters["late_replies"] += 1
            return False
        record.t_in = t_in
        record.responder = reply.responder_ip
        if record.timer is not None:
            record.timer.cancel()
        return True

    def _route_router_id_reply(self, reply):
        entry = self._pending_rid_queries.pop(reply.icmp_id, None)
        if entry is None:
            self.counters["unknown_replies"] += 1
            return
        fut, timer = entry
        timer.cancel()
        self.allocator.release(reply.icmp_id)
        identity = frames.decode_router_identity(reply.payload)
        if identity is None:
            fut.set_exception(frames.MalformedFrame("undecodable identity"))
        else:
            fut.set_result(identity)

    def _handle_other(self, frame, in_port):
        if self.router_id_serve and self.router_identity is not None \
                and self.session_active():
            query = frames.parse_router_id_query(frame)
            if query is not None:
                reply = frames.build_router_id_reply(frame, self.router_identity)
                self._session.send_probe(in_port, reply)
                self.counters["router_id_served"] += 1
                return
        self.counters["other_frames"] += 1

    # -- router identity -----------------------------------------------------------

    def set_router_config(self, serve, identity):
        self.router_id_serve = serve
        self.router_identity = identity

    def start_router_id_query(self, target, out_port=None,
                              timeout_us=2_000_000):
        """Ask a remote host for its identity.  The future resolves with a
        RouterIdentity or fails with TimeoutError."""
        session = self._require_session()
        icmp_id = self.allocator.allocate()
        frame = frames.build_router_id_query(
            self.settings.src_ip, target, self.settings.src_mac,
            self.settings.next_hop_mac, icmp_id=icmp_id)
        fut = Future()
        timer = self.loop.call_later(timeout_us, self._expire_rid_query, icmp_id)
        self._pending_rid_queries[icmp_id] = (fut, timer)
        session.send_probe(self.settings.out_port if out_port is None
                           else out_port, frame)
        return fut

    def _expire_rid_query(self, icmp_id):
        entry = self._pending_rid_queries.pop(icmp_id, None)
        if entry is not None:
            self.allocator.release(icmp_id)
            entry[0].set_exception(TimeoutError("identity query unanswered"))

    # -- dumps and clears -------------------------------------------------------------

    def dump_ping(self):
        out = {}
        for icmp_id, task in self.pings.items():
            probes = []
            for seq in sorted(task.records):
                r = task.records[seq]
                probes.append([r.t_out, r.t_in, r.responder])
            out[str(icmp_id)] = {
                "tgt": task.target,
                "rtt_cs_us": task.rtt_cs_at_start,
                "probes": probes,
            }
        return out

    def dump_traceroute(self):
        out = {}
        for icmp_id, task in self.traceroutes.items():
            state = task.terminated
            last_ttl = task.dest_ttl if state == TERMINATED_DESTINATION else MAX_TTL
            hops = {}
            for ttl in range(1, last_ttl + 1):
                row = []
                for idx in range(task.probes_per_ttl):
                    record = task.records.get((ttl - 1) * task.probes_per_ttl + idx)
                    if record is None or record.t_in is None:
                        row.append([None, None])
                    else:
                        row.append([record.responder,
                                    estimate_rtt(record, task.rtt_cs_at_start)])
                hops[str(ttl)] = row
            out[str(icmp_id)] = {
                "tgt": task.target,
                "probes_per_ttl": task.probes_per_ttl,
                "rtt_cs_us": task.rtt_cs_at_start,
                "terminated": state,
                "hops": hops,
            }
        return out

    def clear_ping(self):
        self._clear_tasks(self.pings)

    def clear_traceroute(self):
        self._clear_tasks(self.traceroutes)

    def _clear_tasks(self, table):
        for icmp_id, task in table.items():
            task.cleared = True
            for record in task.records.values():
                if record.timer is not None:
                    record.timer.cancel()
            self.allocator.release(icmp_id)
        table.clear()
