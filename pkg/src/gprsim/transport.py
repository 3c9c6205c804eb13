"""Per-UE multipath sender, per-UAV FIFO links and the receiver.

Each UAV relay owns one FIFO shared by all UEs it serves.  A packet from
UE n occupies the server for ``size / capacity[n, m]`` seconds; its own
one-way delay is the queueing wait plus the propagation delay (the ACK path
is loss-free with the same propagation delay).  Packets are dropped either
by the link's loss probability or by drop-tail at ``buffer_packets``.

Trace rows are ``(slot, ue, path, seq, event, rtt_s, bytes)`` with
``event`` one of send/drop/deliver/ack/timeout.  ``rtt_s`` holds the
measured RTT on ack rows and the one-way delay on deliver rows.
"""

from __future__ import annotations

import csv
import enum
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cc import CcState, Estimators
from .config import SimConfig

TRACE_HEADER = ("slot", "ue", "path", "seq", "event", "rtt_s", "bytes")


class Status(enum.Enum):
    IN_FLIGHT = "in_flight"
    ACKED = "acked"
    LOST = "lost"


@dataclass(eq=False)
class Packet:
    seq: int
    ue: int
    path: int
    size: int
    send_time: float
    slot: int
    features: np.ndarray | None = None
    ho_dist: bool = False
    ho_switch: bool = False
    status: Status = Status.IN_FLIGHT
    deliver_time: float | None = None  # set when the ACK is processed
    arrive_at: float | None = None  # scheduled receiver arrival
    ack_at: float | None = None  # scheduled ACK return
    rtt: float | None = None
    dropped: bool = False
    arrival_rank: int | None = None


@dataclass(eq=False)
class Subflow:
    ue: int
    path: int
    cwnd: float
    sst: float
    est: Estimators
    cc: CcState
    history: deque
    in_flight: int = 0
    established: bool = False
    last_active: float = -math.inf
    outstanding: deque = field(default_factory=deque)
    dup_acks: int = 0
    late_acks: int = 0
    losses: int = 0
    coupled: bool = False  # counts toward coupled increases this slot

    @property
    def srtt(self) -> float:
        return self.est.srtt


@dataclass
class ArrivalLog:
    ue: int
    arrivals: list = field(default_factory=list)  # (seq, rank) in arrival order
    delays: list = field(default_factory=list)
    sent: int = 0
    acked: int = 0
    lost: int = 0  # sender-side timeouts
    dropped: int = 0  # realized network drops
    delivered_bytes: int = 0

    def record_arrival(self, pkt: Packet) -> int:
        rank = len(self.arrivals) + 1
        self.arrivals.append((pkt.seq, rank))
        self.delays.append(pkt.arrive_at - pkt.send_time)
        self.delivered_bytes += pkt.size
        return rank

    def ranks_in_seq_order(self) -> list[int]:
        return [r for _, r in sorted(self.arrivals)]


@dataclass
class Feedback:
    """One scheduler feedback sample: features at send, choice sign, response time."""

    ue: int
    path: int
    features: np.ndarray
    c: int
    t_tilde: float


class Transport:
    def __init__(self, cfg: SimConfig, controller, record_trace: bool = True):
        self.cfg = cfg
        scen = cfg.scenario
        self.mss = scen.mss
        self.controller = controller
        self.subflows = [[self._new_subflow(n, m) for m in range(scen.num_paths)]
                         for n in range(scen.num_ues)]
        self.logs = [ArrivalLog(n) for n in range(scen.num_ues)]
        self.next_seq = [1] * scen.num_ues
        self.free_at = [0.0] * scen.num_paths
        self.waiting = [deque() for _ in range(scen.num_paths)]
        self.events: list = []
        self._counter = 0
        self.record_trace = record_trace
        self.trace: list = []
        self.packets: list[Packet] = []

    def _new_subflow(self, n: int, m: int) -> Subflow:
        return Subflow(
            ue=n, path=m, cwnd=1.0, sst=self.cfg.cc.initial_sst,
            est=Estimators(rtts=deque(maxlen=self.cfg.cc.rtt_window)),
            cc=self.controller.new_state(),
            history=deque(maxlen=self.cfg.transport.history_len),
        )

    def _log(self, slot, pkt: Packet, event: str, value: float = 0.0) -> None:
        if self.record_trace:
            self.trace.append((slot, pkt.ue, pkt.path, pkt.seq, event, value, pkt.size))

    # ------------------------------------------------------------ sending
    def t_max(self, sf: Subflow) -> float:
        tc = self.cfg.transport
        if tc.t_max is not None:
            return tc.t_max
        return min(max(4.0 * sf.srtt, tc.t_max_min), tc.t_max_max)

    def connect(self, sf: Subflow, link, clock: float) -> bool:
        """Mark the subflow active at ``clock``; returns True on (re)connection."""
        idle = clock - sf.last_active
        fresh = not sf.established
        if fresh:
            sf.established = True
            sf.est.seed_rtt(2.0 * link.delay)
        reconnect = fresh or idle > self.cfg.transport.idle_restart_rtts * max(sf.srtt, 1e-9)
        if reconnect:
            if not fresh:
                sf.cwnd = min(sf.cwnd, 1.0)  # idle restart
            self.controller.on_connect(sf, self.subflows[sf.ue])
        sf.last_active = clock
        return reconnect

    def try_send(self, sf: Subflow, link, clock: float, slot: int, features=None,
                 limit: int | None = None, spacing: float = 0.0,
                 ho_dist: bool = False, ho_switch: bool = False) -> list[Packet]:
        """Emit up to ``floor(cwnd - in_flight)`` packets starting at ``clock``."""
        if not link.up:
            return []
        room = math.floor(sf.cwnd - sf.in_flight + 1e-9)
        if limit is not None:
            room = min(room, limit)
        out = []
        for k in range(max(room, 0)):
            pkt = Packet(
                seq=self.next_seq[sf.ue], ue=sf.ue, path=sf.path, size=self.mss,
                send_time=clock + k * spacing, slot=slot,
                features=None if features is None else np.array(features, dtype=float),
                ho_dist=ho_dist, ho_switch=ho_switch,
            )
            self.next_seq[sf.ue] += 1
            sf.in_flight += 1
            sf.outstanding.append(pkt)
            self.logs[sf.ue].sent += 1
            self.packets.append(pkt)
            self._log(slot, pkt, "send")
            out.append(pkt)
        return out

    # ----------------------------------------------------------- delivery
    def _push(self, time: float, kind: str, pkt: Packet) -> None:
        self._counter += 1
        heapq.heappush(self.events, (time, self._counter, kind, pkt))

    def realize(self, packets, world, rng: np.random.Generator, slot: int) -> list[Packet]:
        """Decide each packet's fate in send-time order; returns the dropped ones."""
        dropped = []
        for pkt in sorted(packets, key=lambda p: (p.send_time, p.ue, p.seq)):
            n, m = pkt.ue, pkt.path
            buffer = self.cfg.scenario.links[m].buffer_packets
            waiting = self.waiting[m]
            while waiting and waiting[0] <= pkt.send_time:
                waiting.popleft()
            cap = world.capacity[n, m]
            if rng.random() < world.loss_prob[n, m] or len(waiting) >= buffer or cap <= 0:
                pkt.dropped = True
                self.logs[n].dropped += 1
                dropped.append(pkt)
                self._log(slot, pkt, "drop")
                continue
            start = max(pkt.send_time, self.free_at[m])
            self.free_at[m] = start + pkt.size * 8.0 / cap
            if start > pkt.send_time:
                waiting.append(start)
            delay = world.delay[n, m]
            pkt.arrive_at = start + delay
            pkt.ack_at = pkt.arrive_at + delay
            self._push(pkt.arrive_at, "deliver", pkt)
            self._push(pkt.ack_at, "ack", pkt)
        return dropped

    def deliver_step(self, packets, world, rng: np.random.Generator, until: float, slot: int):
        """Realize ``packets`` and resolve every event due before ``until``.

        Returns ``(acks, losses)``: packets whose ACK reached the sender, and
        packets dropped in the network during this step.
        """
        losses = self.realize(packets, world, rng, slot)
        acks, self.delivered_now = [], []
        while self.events and self.events[0][0] < until:
            _, _, kind, pkt = heapq.heappop(self.events)
            if kind == "deliver":
                pkt.arrival_rank = self.logs[pkt.ue].record_arrival(pkt)
                self.delivered_now.append(pkt)
                self._log(slot, pkt, "deliver", pkt.arrive_at - pkt.send_time)
            else:
                acks.append(pkt)
        return acks, losses

    # ------------------------------------------------------------ feedback
    def on_ack(self, sf: Subflow, pkt: Packet, rtt: float, slot: int = -1) -> Feedback | None:
        if pkt.status is not Status.IN_FLIGHT:
            if pkt.status is Status.ACKED:
                sf.dup_acks += 1
            else:
                sf.late_acks += 1
            return None
        pkt.status = Status.ACKED
        pkt.rtt = rtt
        pkt.deliver_time = pkt.arrive_at
        sf.in_flight -= 1
        self.logs[sf.ue].acked += 1
        self._log(slot, pkt, "ack", rtt)
        return Feedback(sf.ue, sf.path, pkt.features, +1, rtt)

    def on_timeout(self, sf: Subflow, pkt: Packet, t_max: float, slot: int = -1) -> Feedback | None:
        if pkt.status is not Status.IN_FLIGHT:
            return None
        pkt.status = Status.LOST
        sf.in_flight -= 1
        sf.losses += 1
        self.logs[sf.ue].lost += 1
        self._log(slot, pkt, "timeout", t_max)
        return Feedback(sf.ue, sf.path, pkt.features, -1, t_max)

    def expired(self, sf: Subflow, clock: float) -> list[Packet]:
        """In-flight packets on ``sf`` older than its timeout at ``clock``."""
        t_max = self.t_max(sf)
        out = []
        q = sf.outstanding
        while q and q[0].status is not Status.IN_FLIGHT:
            q.popleft()
        for pkt in q:
            if pkt.status is Status.IN_FLIGHT and clock - pkt.send_time > t_max:
                out.append(pkt)
            elif clock - pkt.send_time <= t_max:
                break
        return out

    def refresh_coupling(self, clock: float) -> None:
        """A subflow is coupled while it has data in flight or was used recently."""
        k = self.cfg.transport.idle_restart_rtts
        for row in self.subflows:
            for sf in row:
                sf.coupled = sf.established and (
                    sf.in_flight > 0 or clock - sf.last_active <= k * max(sf.srtt, 1e-9))

    # --------------------------------------------------------------- misc
    def counts(self) -> tuple[int, int, int, int]:
        sent = sum(log.sent for log in self.logs)
        acked = sum(log.acked for log in self.logs)
        lost = sum(log.lost for log in self.logs)
        in_flight = sum(sf.in_flight for row in self.subflows for sf in row)
        return sent, acked, lost, in_flight


def write_trace(rows, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow((r[0], r[1], r[2], r[3], r[4], repr(float(r[5])), r[6]))


def read_trace(path: str | Path) -> list[tuple]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        return [(int(s), int(u), int(p), int(q), e, float(r), int(b))
                for s, u, p, q, e, r, b in reader]
