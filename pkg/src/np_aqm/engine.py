"""Event queue, bounded scratch rings and the eight-context receive stage."""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from np_aqm.core import Fate, Packet, ReassemblyError, elems, reassemble, segment_packet


class SimulationError(RuntimeError):
    """A broken internal invariant (scheduler or engine bug)."""


class EventQueue:
    """Min-heap of ``(time, seq, fn, arg)``; equal times pop in insertion order."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0
        self.processed = 0

    def push(self, time: int, fn: Callable, arg=None) -> None:
        if time < self.now:
            raise SimulationError(f"event at t={time} scheduled in the past (now={self.now})")
        heapq.heappush(self._heap, (time, self._seq, fn, arg))
        self._seq += 1

    def __len__(self) -> int:
        return len(self._heap)

    def peek_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def run(self, until: Optional[int] = None) -> None:
        heap = self._heap
        while heap and (until is None or heap[0][0] <= until):
            t, _, fn, arg = heapq.heappop(heap)
            self.now = t
            self.processed += 1
            fn(arg)
        if until is not None and until > self.now:
            self.now = until


class RingBuffer:
    """Bounded FIFO between pipeline stages. A full ring refuses puts; it never drops."""

    def __init__(self, capacity: int = 128):
        if capacity < 1:
            raise ValueError("ring capacity must be positive")
        self.capacity = capacity
        self._entries: deque = deque()
        self.put_count = 0
        self.get_count = 0

    @property
    def occupancy(self) -> int:
        return self.put_count - self.get_count

    def put(self, item) -> bool:
        if len(self._entries) >= self.capacity:
            return False
        self._entries.append(item)
        self.put_count += 1
        return True

    def get(self):
        if not self._entries:
            return None
        self.get_count += 1
        return self._entries.popleft()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


def ring_put(r: RingBuffer, pkt) -> bool:
    return r.put(pkt)


def ring_get(r: RingBuffer):
    return r.get()


@dataclass
class ThreadContext:
    index: int
    busy_until: int = 0
    holding: Optional[int] = None


class _Job:
    __slots__ = ("pkt", "segs", "ctx", "done")

    def __init__(self, pkt, segs, ctx):
        self.pkt = pkt
        self.segs = segs
        self.ctx = ctx
        self.done = False


class ReceiveStage:
    """RBUF element pool plus eight strictly ordered thread contexts.

    Contexts take packets round-robin and may finish out of order, but a
    packet is handed to ``sink`` only after every earlier arrival has been.
    ``sink(pkt)`` returns False when the downstream ring is full; the head
    packet then keeps its context and RBUF elements until ``retry()``.
    """

    def __init__(self, eq: EventQueue, sink: Callable[[Packet], bool], n_contexts: int = 8,
                 rbuf_elems: int = 128, service_ns_per_mpacket: int = 50,
                 service_time: Optional[Callable[[Packet], int]] = None,
                 on_drop: Optional[Callable[[Packet, str], None]] = None,
                 segmenter=segment_packet):
        self.eq = eq
        self.sink = sink
        self.contexts = [ThreadContext(i) for i in range(n_contexts)]
        self.rbuf_elems = rbuf_elems
        self.rbuf_used = 0
        self.service_ns_per_mpacket = service_ns_per_mpacket
        self.service_time = service_time
        self.on_drop = on_drop
        self.segmenter = segmenter
        self._free = deque(range(n_contexts))
        self._waiting: deque[_Job] = deque()
        self._inflight: deque[_Job] = deque()
        self.blocked = False
        self.ingress_drops = 0
        self.reassembly_errors = 0
        self.committed = 0

    def resident(self) -> int:
        return len(self._waiting) + len(self._inflight)

    def packets(self) -> list[Packet]:
        return [j.pkt for j in self._waiting] + [j.pkt for j in self._inflight]

    def arrive(self, pkt: Packet) -> bool:
        n = elems(pkt.size_bytes)
        if self.rbuf_used + n > self.rbuf_elems:
            self.ingress_drops += 1
            pkt.fate = Fate.DROPPED_QUEUE_FULL
            if self.on_drop:
                self.on_drop(pkt, "rbuf")
            return False
        self.rbuf_used += n
        self._waiting.append(_Job(pkt, self.segmenter(pkt), None))
        self._dispatch()
        return True

    def _service(self, job: _Job) -> int:
        if self.service_time is not None:
            return self.service_time(job.pkt)
        return len(job.segs) * self.service_ns_per_mpacket

    def _dispatch(self) -> None:
        now = self.eq.now
        while self._waiting and self._free:
            job = self._waiting.popleft()
            ctx = self.contexts[self._free.popleft()]
            ctx.holding = job.pkt.id
            ctx.busy_until = now + self._service(job)
            job.ctx = ctx
            self._inflight.append(job)
            self.eq.push(ctx.busy_until, self._finish, job)

    def _finish(self, job: _Job) -> None:
        job.done = True
        self._commit()

    def retry(self) -> None:
        if self.blocked:
            self._commit()

    def _commit(self) -> None:
        self.blocked = False
        q = self._inflight
        while q and q[0].done:
            job = q[0]
            try:
                pid, total = reassemble(job.segs)
                if pid != job.pkt.id or total != job.pkt.size_bytes:
                    raise ReassemblyError(f"packet {job.pkt.id}: reassembled {total} bytes")
            except ReassemblyError:
                self.reassembly_errors += 1
                self._release(q.popleft())
                job.pkt.fate = Fate.DROPPED_QUEUE_FULL
                if self.on_drop:
                    self.on_drop(job.pkt, "reassembly")
                continue
            if not self.sink(job.pkt):
                self.blocked = True
                break
            self._release(q.popleft())
            self.committed += 1
        self._dispatch()

    def _release(self, job: _Job) -> None:
        job.ctx.holding = None
        # round-robin: freed contexts rejoin at the back
        self._free.append(job.ctx.index)
        self.rbuf_used -= elems(job.pkt.size_bytes)


def receive_dispatch(arrivals: Iterable[tuple[int, Packet, int]], n_contexts: int = 8,
                     rbuf_elems: int = 1 << 30) -> list[tuple[int, int]]:
    """Run arrivals ``(time, packet, service_ns)`` through a receive stage with
    an always-ready sink; returns ``(packet_id, commit_time)`` in commit order."""
    eq = EventQueue()
    out: list[tuple[int, int]] = []
    service = {}

    def sink(pkt):
        out.append((pkt.id, eq.now))
        return True

    stage = ReceiveStage(eq, sink, n_contexts=n_contexts, rbuf_elems=rbuf_elems,
                         service_time=lambda p: service[p.id])
    for t, pkt, s in arrivals:
        service[pkt.id] = s
        eq.push(t, stage.arrive, pkt)
    eq.run()
    return out
