"""Enqueue-time queue management: drop-tail, RED and priority-overflow AQM.

Each policy answers one question per arriving packet: accept it on its
target port, push it to another port, park it in the port's local-memory
overflow queue, or drop it. Policies only decide; `EgressQueue` holds state
and `apply_verdict` performs the decision.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

from np_aqm.core import Fate, Packet, TrafficClass

HIGH_PRIORITY = (TrafficClass.PRIV, TrafficClass.EF)


class VerdictKind(Enum):
    ACCEPT = "Accept"
    REDIRECT = "Redirect"
    DEFER = "Defer"
    DROP = "Drop"


class Verdict(NamedTuple):
    kind: VerdictKind
    port: Optional[int] = None
    from_port: Optional[int] = None
    reason: Optional[Fate] = None

    @classmethod
    def accept(cls, port: int) -> "Verdict":
        return cls(VerdictKind.ACCEPT, port)

    @classmethod
    def redirect(cls, from_port: int, to_port: int) -> "Verdict":
        return cls(VerdictKind.REDIRECT, to_port, from_port)

    @classmethod
    def defer(cls, port: int) -> "Verdict":
        return cls(VerdictKind.DEFER, port)

    @classmethod
    def drop(cls, reason: Fate, port: Optional[int] = None) -> "Verdict":
        return cls(VerdictKind.DROP, port, None, reason)

    def __str__(self) -> str:
        if self.kind is VerdictKind.REDIRECT:
            return f"Redirect({self.from_port}->{self.port})"
        if self.kind is VerdictKind.DROP:
            return f"Drop({self.reason.value})"
        return f"{self.kind.value}({self.port})"


class EgressQueue:
    """Transmit-side queue of one egress port, counted in 64-byte TBUF elements.

    ``occupancy_elems`` includes the packet currently being serialized; its
    elements are released only at transmit completion.
    """

    def __init__(self, port: int, capacity_elems: int = 128, soft_fraction: float = 0.85,
                 deferred_capacity: int = 512):
        if capacity_elems < 1:
            raise ValueError("capacity_elems must be positive")
        if deferred_capacity < 0:
            raise ValueError("deferred_capacity must be >= 0")
        self.port = port
        self.capacity_elems = capacity_elems
        self.soft_threshold_elems = 0
        self.set_soft_fraction(soft_fraction)
        self.occupancy_elems = 0
        # one heap per class, keyed (t_enqueued, id)
        self._heaps: list[list] = [[] for _ in TrafficClass]
        self.queued = 0
        self.in_service: Optional[Packet] = None
        self.deferred: deque[Packet] = deque()
        self.deferred_capacity = deferred_capacity
        self.admitting = True
        self.idle_since: Optional[int] = 0

    def set_soft_fraction(self, fraction: float) -> None:
        if not 0 < fraction <= 1:
            raise ValueError(f"soft threshold fraction {fraction} not in (0, 1]")
        self.soft_threshold_elems = math.floor(fraction * self.capacity_elems)

    def fits(self, pkt: Packet) -> bool:
        return self.occupancy_elems + pkt.n_elems <= self.capacity_elems

    @property
    def fill(self) -> float:
        return self.occupancy_elems / self.capacity_elems

    def push(self, pkt: Packet) -> None:
        n = pkt.n_elems
        if self.occupancy_elems + n > self.capacity_elems:
            raise RuntimeError(f"port {self.port}: push beyond capacity")
        heapq.heappush(self._heaps[pkt.cls], (pkt.t_enqueued, pkt.id, pkt))
        self.queued += 1
        self.occupancy_elems += n
        self.idle_since = None

    def pop_class(self, cls: TrafficClass) -> Packet:
        self.queued -= 1
        return heapq.heappop(self._heaps[cls])[2]

    def class_depth(self, cls: TrafficClass) -> int:
        return len(self._heaps[cls])

    def release(self, pkt: Packet, now: int) -> None:
        """Free the elements of a packet whose transmission completed."""
        self.occupancy_elems -= pkt.n_elems
        if self.occupancy_elems == 0:
            self.idle_since = now

    def resident(self) -> int:
        return self.queued + len(self.deferred) + (self.in_service is not None)

    def packets(self) -> list[Packet]:
        out = [e[2] for h in self._heaps for e in h]
        if self.in_service is not None:
            out.append(self.in_service)
        return out


def droptail_enqueue(q: EgressQueue, pkt: Packet) -> Verdict:
    if q.fits(pkt):
        return Verdict.accept(q.port)
    return Verdict.drop(Fate.DROPPED_QUEUE_FULL, q.port)


@dataclass
class RedState:
    """EWMA bookkeeping for one RED queue; thresholds in elements."""

    min_th: float
    max_th: float
    w_q: float = 0.002
    max_p: float = 0.10
    typical_ns: int = 1
    avg: float = 0.0
    count: int = -1

    def __post_init__(self):
        if not 0 < self.w_q <= 1:
            raise ValueError(f"w_q={self.w_q} not in (0, 1]")
        if not 0 < self.max_p <= 1:
            raise ValueError(f"max_p={self.max_p} not in (0, 1]")
        if not self.min_th < self.max_th:
            raise ValueError(f"min_th={self.min_th} must be below max_th={self.max_th}")
        if self.typical_ns < 1:
            raise ValueError("typical_ns must be positive")

    @classmethod
    def for_queue(cls, q: EgressQueue, typical_ns: int, w_q: float = 0.002, max_p: float = 0.10,
                  min_frac: float = 0.25, max_frac: float = 0.75) -> "RedState":
        s = cls(min_th=min_frac * q.capacity_elems, max_th=max_frac * q.capacity_elems,
                w_q=w_q, max_p=max_p, typical_ns=typical_ns)
        if s.max_th > q.capacity_elems:
            raise ValueError("max_th exceeds queue capacity")
        return s

    def drop_probability(self) -> float:
        """Marking probability for the current ``avg`` and ``count``."""
        p_b = self.max_p * (self.avg - self.min_th) / (self.max_th - self.min_th)
        denom = 1.0 - self.count * p_b
        if denom <= 0:
            return 1.0
        return min(1.0, p_b / denom)


def red_update_avg(s: RedState, q: EgressQueue, now: int) -> float:
    if q.occupancy_elems > 0 or q.idle_since is None:
        s.avg = (1.0 - s.w_q) * s.avg + s.w_q * q.occupancy_elems
    else:
        m = (now - q.idle_since) / s.typical_ns
        s.avg = s.avg * (1.0 - s.w_q) ** m
    return s.avg


def red_enqueue(s: RedState, q: EgressQueue, pkt: Packet, rng: random.Random) -> Verdict:
    """RED arrival decision; expects ``s.avg`` already updated for this arrival.

    A uniform draw is consumed only in the min_th..max_th band.
    """
    if s.avg < s.min_th:
        s.count = -1
    elif s.avg >= s.max_th:
        s.count = 0
        return Verdict.drop(Fate.DROPPED_RED, q.port)
    else:
        s.count += 1
        if rng.random() < s.drop_probability():
            s.count = 0
            return Verdict.drop(Fate.DROPPED_RED, q.port)
    if not q.fits(pkt):
        s.count = 0
        return Verdict.drop(Fate.DROPPED_QUEUE_FULL, q.port)
    return Verdict.accept(q.port)


def least_occupied(queues: Sequence[EgressQueue], ports, pkt: Packet) -> Optional[int]:
    best = None
    for p in sorted(ports):
        q = queues[p]
        if not q.fits(pkt):
            continue
        if best is None or q.occupancy_elems * queues[best].capacity_elems < \
                queues[best].occupancy_elems * q.capacity_elems:
            best = p
    return best


def anaqm_enqueue(queues: Sequence[EgressQueue], pkt: Packet, target_port: int,
                  low_ports: Sequence[int]) -> Verdict:
    """Priority-overflow decision.

    High-priority packets fill their port to physical capacity and then spill
    to the least-occupied low-priority port. Low-priority packets are admitted
    below the soft threshold; above it the port stops admitting and arrivals
    wait in the bounded local-memory queue.
    """
    q = queues[target_port]
    if pkt.cls in HIGH_PRIORITY:
        if q.fits(pkt):
            return Verdict.accept(target_port)
        alt = least_occupied(queues, [p for p in low_ports if p != target_port], pkt)
        if alt is None:
            return Verdict.drop(Fate.DROPPED_QUEUE_FULL, target_port)
        return Verdict.redirect(target_port, alt)
    if q.admitting and q.occupancy_elems < q.soft_threshold_elems and q.fits(pkt):
        return Verdict.accept(target_port)
    if len(q.deferred) < q.deferred_capacity:
        return Verdict.defer(target_port)
    return Verdict.drop(Fate.DROPPED_DEFERRED_FULL, target_port)


def drain_deferred(q: EgressQueue) -> list[Packet]:
    """Promote deferred packets while the port is under its soft threshold."""
    promoted = []
    while q.deferred and q.occupancy_elems < q.soft_threshold_elems and q.fits(q.deferred[0]):
        pkt = q.deferred.popleft()
        q.push(pkt)
        promoted.append(pkt)
    if not q.deferred and q.occupancy_elems < q.soft_threshold_elems:
        q.admitting = True
    return promoted


def apply_verdict(queues: Sequence[EgressQueue], pkt: Packet, v: Verdict, now: int) -> None:
    """Carry out ``v``: place the packet, or stamp its drop fate."""
    if v.kind is VerdictKind.DROP:
        pkt.fate = v.reason
        return
    pkt.t_enqueued = now
    pkt.port = v.port
    q = queues[v.port]
    if v.kind is VerdictKind.DEFER:
        q.admitting = False
        q.deferred.append(pkt)
        return
    if v.kind is VerdictKind.REDIRECT:
        pkt.redirected = True
    q.push(pkt)


class DropTail:
    name = "droptail"

    def __init__(self, queues: Sequence[EgressQueue]):
        self.queues = queues

    def enqueue(self, pkt: Packet, port: int, now: int) -> Verdict:
        return droptail_enqueue(self.queues[port], pkt)


class Red:
    name = "red"

    def __init__(self, queues: Sequence[EgressQueue], typical_ns: Sequence[int], rng: random.Random,
                 w_q: float = 0.002, max_p: float = 0.10, min_frac: float = 0.25,
                 max_frac: float = 0.75):
        self.queues = queues
        self.rng = rng
        self.states = [RedState.for_queue(q, t, w_q, max_p, min_frac, max_frac)
                       for q, t in zip(queues, typical_ns)]

    def enqueue(self, pkt: Packet, port: int, now: int) -> Verdict:
        s, q = self.states[port], self.queues[port]
        red_update_avg(s, q, now)
        return red_enqueue(s, q, pkt, self.rng)


class AnAqm:
    name = "anaqm"

    def __init__(self, queues: Sequence[EgressQueue], low_ports: Sequence[int]):
        self.queues = queues
        self.low_ports = tuple(sorted(low_ports))
        if not self.low_ports:
            raise ValueError("anaqm needs at least one low-priority port to spill into")

    def enqueue(self, pkt: Packet, port: int, now: int) -> Verdict:
        return anaqm_enqueue(self.queues, pkt, port, self.low_ports)
