"""One policy run over one scenario: generator -> receive stage -> scratch ring
-> classifier -> queue policy -> strict-priority transmit."""

from __future__ import annotations

import dataclasses
import hashlib
from typing import Callable, Optional, TextIO

from np_aqm import metrics as m
from np_aqm.aqm import HIGH_PRIORITY, AnAqm, DropTail, EgressQueue, Red, VerdictKind, apply_verdict, \
    drain_deferred
from np_aqm.classifier import Classifier
from np_aqm.core import ELEMENT_BYTES, Fate, Packet, TrafficClass, serialization_ns
from np_aqm.engine import EventQueue, ReceiveStage, RingBuffer, SimulationError
from np_aqm.scenario import Scenario
from np_aqm.scheduler import PRIORITY_ORDER, PortLink, complete, publish_tx_feedback, select_next, \
    transmit
from np_aqm.traffic import ArrivalEvent, Generator, arrival_record, substream

_DROP_EVENT = {
    Fate.DROPPED_QUEUE_FULL: m.DROP_QUEUE_FULL,
    Fate.DROPPED_DEFERRED_FULL: m.DROP_DEFERRED_FULL,
    Fate.DROPPED_RED: m.DROP_RED,
    Fate.DROPPED_TTL: m.DROP_TTL,
}
_VERDICT_EVENT = {VerdictKind.ACCEPT: m.ENQUEUE, VerdictKind.REDIRECT: m.REDIRECT,
                  VerdictKind.DEFER: m.DEFER}


def make_policy(name: str, s: Scenario, queues, low_ports):
    if name == "droptail":
        return DropTail(queues)
    if name == "red":
        typical = [serialization_ns(ELEMENT_BYTES, r) for r in s.port_rates_bps]
        r = s.red
        return Red(queues, typical, substream(s.seed, "red"), w_q=r.w_q, max_p=r.max_p,
                   min_frac=r.min_th, max_frac=r.max_th)
    if name == "anaqm":
        return AnAqm(queues, low_ports)
    raise ValueError(f"unknown policy {name!r}")


@dataclasses.dataclass
class Audit:
    selections: int = 0
    priority_violations: int = 0
    hp_overflow_instants: int = 0
    hp_overflow_low_full: int = 0
    hp_drops_with_room: int = 0
    flow_order_violations: int = 0
    redirected_flows: int = 0
    conservation_ok: bool = True

    @property
    def ok(self) -> bool:
        return (self.priority_violations == 0 and self.hp_drops_with_room == 0
                and self.flow_order_violations == 0 and self.conservation_ok)


class Simulator:
    """Single-threaded, deterministic run of one policy.

    ``event_log`` receives one text line per lifecycle event; ``decision_trace``
    (if a list) collects ``(port, selected_class, top_queued_class)`` for every
    transmit selection.
    """

    def __init__(self, scenario: Scenario, policy: str, event_log: Optional[TextIO] = None,
                 decision_trace: Optional[list] = None,
                 on_event: Optional[Callable[[int, str, Packet, Optional[int]], None]] = None):
        s = scenario
        s.validate()
        self.scenario = s
        self.policy_name = policy
        self.eq = EventQueue()
        n_ports = len(s.port_rates_bps)
        self.metrics = m.MetricCounters(n_ports, seed=s.seed, config_hash=s.config_hash())
        self.queues = [EgressQueue(p, s.tbuf_elems, s.soft_threshold, s.deferred_capacity)
                       for p in range(n_ports)]
        self.links = [PortLink(p, r) for p, r in enumerate(s.port_rates_bps)]
        routing = s.routing()
        self.classifier = Classifier(routing, s.refresh_interval_ns, s.max_flows, s.node_id)
        self.classifier.queues = self.queues
        self.low_ports = routing.low_ports()
        self.policy = make_policy(policy, s, self.queues, self.low_ports)
        self.ring = RingBuffer(s.ring_capacity)
        self.rx = ReceiveStage(self.eq, self._to_ring, s.contexts, s.rbuf_elems, s.rx_service_ns,
                               on_drop=self._ingress_drop)
        self.gen = Generator(s.traffic, self._resolve_capsules())
        self.audit = Audit()
        self.event_log = event_log
        self.decision_trace = decision_trace
        self.on_event = on_event
        self.snapshots: list[tuple[int, list[dict]]] = []
        self._cl_holding: Optional[Packet] = None
        self._arrival_hash = hashlib.sha256()
        self._refresh_pending = False
        self._last_departed: dict = {}
        self._redirected_flows: set = set()
        self._order_broken: set = set()
        self._started = False
        self._pending_arrival = False

    def _resolve_capsules(self):
        out = []
        flows = None
        for at, d in self.scenario.capsules:
            d = dataclasses.replace(d, args=dict(d.args), trace_log=[])
            if "flow" in d.args:
                if flows is None:
                    flows = Generator(self.scenario.traffic).flows
                d.target = flows[int(d.args["flow"])].key
            out.append((at, d))
        return out

    # ---- bookkeeping ------------------------------------------------------------
    def _rec(self, kind: str, pkt: Packet, port: Optional[int]) -> None:
        now = self.eq.now
        self.metrics.record(now, pkt.id, kind, pkt.cls, port, pkt.size_bytes)
        if self.event_log is not None:
            self.event_log.write(m.format_event(now, pkt.id, kind, pkt.cls, port) + "\n")
        if self.on_event is not None:
            self.on_event(now, kind, pkt, port)

    def resident(self) -> int:
        n = self.rx.resident() + len(self.ring) + (self._cl_holding is not None)
        return n + sum(q.resident() for q in self.queues)

    def check_conservation(self) -> bool:
        c = self.metrics
        ok = c.generated == c.transmitted + c.dropped() + self.resident()
        ok = ok and c.in_flight() == self.resident()
        if not ok:
            self.audit.conservation_ok = False
        return ok

    @property
    def emitted(self) -> int:
        """Packets the generator has delivered so far (excludes the one look-ahead arrival)."""
        return self.gen.emitted - self._pending_arrival

    @property
    def arrival_hash(self) -> str:
        return self._arrival_hash.hexdigest()

    # ---- pipeline -----------------------------------------------------------------
    def _schedule_next_arrival(self) -> None:
        ev = self.gen.next_arrival()
        self._pending_arrival = ev is not None
        if ev is not None:
            self.eq.push(ev.at, self._arrival, ev)

    def _arrival(self, ev: ArrivalEvent) -> None:
        pkt = ev.packet
        self._pending_arrival = False
        self._arrival_hash.update(arrival_record(ev.at, pkt, ev.ingress_port))
        pkt.ingress = ev.ingress_port
        self._rec(m.ARRIVE, pkt, ev.ingress_port)
        self.rx.arrive(pkt)
        self._schedule_next_arrival()
        if not self._refresh_pending:
            self._refresh_pending = True
            self.eq.push(self.eq.now + self.scenario.refresh_interval_ns, self._refresh)

    def _ingress_drop(self, pkt: Packet, where: str) -> None:
        self._rec(m.DROP_QUEUE_FULL, pkt, None)

    def _to_ring(self, pkt: Packet) -> bool:
        if not self.ring.put(pkt):
            return False
        self._kick_classifier()
        return True

    def _kick_classifier(self) -> None:
        if self._cl_holding is not None or not len(self.ring):
            return
        pkt = self.ring.get()
        self._cl_holding = pkt
        self.eq.push(self.eq.now + self.scenario.classify_service_ns, self._classified, pkt)
        # a slot just opened; let a blocked receive stage commit
        self.rx.retry()

    def _classified(self, pkt: Packet) -> None:
        self._cl_holding = None
        res = self.classifier.classify(pkt, self.eq.now)
        if res is None:
            self._rec(m.DROP_TTL, pkt, None)
        else:
            self.offer(pkt, res[1])
        self._kick_classifier()

    def offer(self, pkt: Packet, port: int) -> None:
        now = self.eq.now
        hp = pkt.cls in HIGH_PRIORITY
        if hp and not self.queues[port].fits(pkt):
            self.audit.hp_overflow_instants += 1
            low = [self.queues[p] for p in self.low_ports]
            if sum(q.occupancy_elems for q in low) >= sum(q.capacity_elems for q in low):
                self.audit.hp_overflow_low_full += 1
        v = self.policy.enqueue(pkt, port, now)
        apply_verdict(self.queues, pkt, v, now)
        if v.kind is VerdictKind.DROP:
            if hp and self.policy_name == "anaqm" and any(q.fits(pkt) for q in self.queues):
                self.audit.hp_drops_with_room += 1
            self._rec(_DROP_EVENT[v.reason], pkt, v.port)
            return
        self._rec(_VERDICT_EVENT[v.kind], pkt, v.port)
        if v.kind is VerdictKind.REDIRECT:
            self._redirected_flows.add(pkt.flow)
        if v.kind is not VerdictKind.DEFER:
            self._try_start(v.port)

    def _try_start(self, port: int) -> None:
        link = self.links[port]
        if link.busy:
            return
        q = self.queues[port]
        if not q.queued:
            return
        top = max(c for c in PRIORITY_ORDER if q.class_depth(c))
        pkt = select_next(q)
        self.audit.selections += 1
        if pkt.cls != top:
            self.audit.priority_violations += 1
        if self.decision_trace is not None:
            self.decision_trace.append((port, pkt.cls, top))
        q.in_service = pkt
        self.eq.push(transmit(pkt, link, self.eq.now), self._tx_done, port)

    def _tx_done(self, port: int) -> None:
        now = self.eq.now
        q, link = self.queues[port], self.links[port]
        pkt = q.in_service
        q.in_service = None
        q.release(pkt, now)
        complete(pkt, link)
        pkt.fate = Fate.TRANSMITTED
        pkt.t_departed = now
        self._rec(m.TX, pkt, port)
        last = self._last_departed.get(pkt.flow)
        if last is not None and last > pkt.id:
            self._order_broken.add(pkt.flow)
        self._last_departed[pkt.flow] = pkt.id
        for p in drain_deferred(q):
            self._rec(m.PROMOTE, p, port)
        publish_tx_feedback(link, q, self.classifier, self.scenario.feedback_every)
        self._try_start(port)

    def _refresh(self, _=None) -> None:
        self.classifier.refresh_table(self.eq.now)
        if len(self.eq):
            self.eq.push(self.eq.now + self.scenario.refresh_interval_ns, self._refresh)
        else:
            self._refresh_pending = False

    def _snapshot(self, _=None) -> None:
        self.snapshots.append((self.eq.now, self.status_snapshot()))
        if len(self.eq):
            self.eq.push(self.eq.now + self.scenario.snapshot_interval_ms * 1_000_000, self._snapshot)

    def status_snapshot(self) -> list[dict]:
        rx_full = [0, 0]
        for p in self.rx.packets():
            rx_full[p.ingress] += p.n_elems
        return m.status_snapshot(self.metrics, self.eq.now, rx_fullness=rx_full,
                                 tx_fullness=[q.occupancy_elems for q in self.queues])

    # ---- driver -------------------------------------------------------------------
    def run(self, until: Optional[int] = None) -> m.MetricCounters:
        """Process events in (time, sequence) order up to ``until`` (default:
        the traffic duration). Packets still queued at the end stay resident."""
        if until is None:
            until = self.scenario.duration_ns
        if not self._started:
            self._started = True
            self._schedule_next_arrival()
            if self.scenario.snapshot_interval_ms and len(self.eq):
                self.eq.push(self.scenario.snapshot_interval_ms * 1_000_000, self._snapshot)
        self.eq.run(until)
        self.audit.redirected_flows = len(self._redirected_flows)
        self.audit.flow_order_violations = len(self._order_broken - self._redirected_flows)
        self.check_conservation()
        self.metrics.meta.update(policy=self.policy_name, arrival_hash=self.arrival_hash,
                                 until_ns=until)
        return self.metrics

    def summary(self) -> dict:
        s = self.scenario
        end = self.eq.now
        tail = (max(0, end - s.tail_window_ns), end)
        out = m.summary(self.metrics)
        out["tail_window_ns"] = list(tail)
        out["tail_throughput_bps"] = m.throughput_bps(self.metrics, None, tail)
        out["resident"] = self.resident()
        out["ingress_drops"] = self.rx.ingress_drops
        out["classifier"] = {"hits": self.classifier.hits, "misses": self.classifier.misses,
                             "evictions": self.classifier.evictions,
                             "applied_capsules": self.classifier.applied_capsules,
                             "ignored_capsules": self.classifier.ignored_capsules,
                             "feedback_updates": self.classifier.feedback_updates}
        out["audit"] = dataclasses.asdict(self.audit)
        return out


def run_policy(scenario: Scenario, policy: str, until: Optional[int] = None, **kw) -> Simulator:
    sim = Simulator(scenario, policy, **kw)
    sim.run(until)
    return sim
