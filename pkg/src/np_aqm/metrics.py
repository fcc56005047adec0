"""Event-sourced counters: loss, queuing delay, throughput and status snapshots.

Every lifecycle event goes through `MetricCounters.record`. The optional
event log has one line per event::

    <time_ns> <packet_id> <event_kind> <class> <port>

with ``-`` for an unset class or port. Replaying a log through `replay`
rebuilds the same packet counters and delay samples (byte counters are not
part of the log).
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from collections import defaultdict, deque
from typing import Iterable, Optional, TextIO

from np_aqm.core import TrafficClass

ARRIVE = "ARRIVE"
ENQUEUE = "ENQUEUE"
REDIRECT = "REDIRECT"
DEFER = "DEFER"
PROMOTE = "PROMOTE"
TX = "TX"
DROP_QUEUE_FULL = "DROP_QUEUE_FULL"
DROP_DEFERRED_FULL = "DROP_DEFERRED_FULL"
DROP_TTL = "DROP_TTL"
DROP_RED = "DROP_RED"

EVENT_KINDS = (ARRIVE, ENQUEUE, REDIRECT, DEFER, PROMOTE, TX,
               DROP_QUEUE_FULL, DROP_DEFERRED_FULL, DROP_TTL, DROP_RED)
DROP_KINDS = (DROP_QUEUE_FULL, DROP_DEFERRED_FULL, DROP_TTL, DROP_RED)
TERMINAL_KINDS = (TX,) + DROP_KINDS
# first enqueue decision of a classified packet
OFFER_KINDS = (ENQUEUE, REDIRECT, DEFER, DROP_QUEUE_FULL, DROP_DEFERRED_FULL, DROP_RED)

FATE_OF = {TX: "Transmitted", DROP_QUEUE_FULL: "DroppedQueueFull",
           DROP_DEFERRED_FULL: "DroppedDeferredFull", DROP_TTL: "DroppedTTL",
           DROP_RED: "DroppedRed"}

RATE_WINDOW_NS = 1_000_000
N_INGRESS = 2


class AuditError(RuntimeError):
    pass


_CLASS_NAMES = tuple(c.name for c in sorted(TrafficClass))


def _cls_name(cls) -> str:
    return "-" if cls is None else _CLASS_NAMES[cls]


class MetricCounters:
    def __init__(self, n_ports: int = 5, seed: Optional[int] = None, config_hash: str = ""):
        self.n_ports = n_ports
        self.meta = {"seed": seed, "config_hash": config_hash}
        self.packets: dict[tuple, int] = defaultdict(int)
        self.bytes: dict[tuple, int] = defaultdict(int)
        self.delays: dict[str, list[int]] = defaultdict(list)
        self.offer_times: dict[str, list[int]] = defaultdict(list)
        self.drop_times: dict[str, list[int]] = defaultdict(list)
        self.tx_ms_bytes: list[dict[int, int]] = [defaultdict(int) for _ in range(n_ports)]
        self._recent_rx = [deque() for _ in range(N_INGRESS)]
        self._recent_tx = [deque() for _ in range(n_ports)]
        self._live: set[int] = set()
        self._seen: set[int] = set()
        self._enq_time: dict[int, int] = {}
        self.events = 0
        self.last_time = 0

    def record(self, time: int, pid: int, kind: str, cls=None, port: Optional[int] = None,
               size: int = 0) -> None:
        name = _cls_name(cls)
        key = (kind, name, -1 if port is None else port)
        self.packets[key] += 1
        self.bytes[key] += size
        self.events += 1
        self.last_time = time
        if kind == ARRIVE:
            if pid in self._seen:
                raise AuditError(f"packet {pid} arrived twice")
            self._seen.add(pid)
            self._live.add(pid)
            if port is not None:
                self._recent_rx[port].append(time)
            return
        if kind in OFFER_KINDS and pid not in self._enq_time:
            self.offer_times[name].append(time)
            if kind in DROP_KINDS:
                self.drop_times[name].append(time)
            else:
                self._enq_time[pid] = time
        if kind in TERMINAL_KINDS:
            if pid not in self._live:
                raise AuditError(f"duplicate or orphan terminal event {kind} for packet {pid}")
            self._live.discard(pid)
            if kind == TX:
                self.delays[name].append(time - self._enq_time.pop(pid))
                self._recent_tx[port].append(time)
                self.tx_ms_bytes[port][time // 1_000_000] += size
            else:
                self._enq_time.pop(pid, None)

    # ---- totals -------------------------------------------------------
    def total(self, kind: str, cls=None, port: Optional[int] = None) -> int:
        name = None if cls is None else _cls_name(cls)
        return sum(v for (k, c, p), v in self.packets.items()
                   if k == kind and (name is None or c == name) and (port is None or p == port))

    @property
    def generated(self) -> int:
        return self.total(ARRIVE)

    @property
    def transmitted(self) -> int:
        return self.total(TX)

    def dropped(self, cls=None) -> int:
        return sum(self.total(k, cls) for k in DROP_KINDS)

    def in_flight(self) -> int:
        return len(self._live)

    def fate_table(self) -> dict:
        """``{(class, port, fate): (packets, bytes)}`` over terminal events."""
        out = {}
        for key in sorted(self.packets):
            kind, name, port = key
            if kind in FATE_OF:
                out[(name, port, FATE_OF[kind])] = (self.packets[key], self.bytes[key])
        return out

    def packet_view(self) -> dict:
        """Counters that survive an event-log round trip."""
        return {"packets": {k: v for k, v in sorted(self.packets.items())},
                "delays": {k: list(v) for k, v in sorted(self.delays.items())}}


def loss_rate(c: MetricCounters, cls, window: Optional[tuple[int, int]] = None) -> Optional[float]:
    """Dropped / offered at the egress queues for ``cls``; None if nothing offered.

    Drops are decided at the offer instant, so a window ``[t0, t1)`` counts
    both offers and drops by that instant.
    """
    name = _cls_name(cls)
    offers, drops = c.offer_times.get(name, []), c.drop_times.get(name, [])
    if window is None:
        n_off, n_drop = len(offers), len(drops)
    else:
        t0, t1 = window
        n_off = bisect.bisect_left(offers, t1) - bisect.bisect_left(offers, t0)
        n_drop = bisect.bisect_left(drops, t1) - bisect.bisect_left(drops, t0)
    if n_off == 0:
        return None
    return n_drop / n_off


def order_stat(sorted_samples: list, q: float):
    """Nearest-rank quantile of already sorted samples."""
    n = len(sorted_samples)
    return sorted_samples[max(0, math.ceil(q * n) - 1)]


def delay_stats(c: MetricCounters, cls) -> Optional[dict]:
    samples = c.delays.get(_cls_name(cls))
    if not samples:
        return None
    s = sorted(samples)
    return {"count": len(s), "mean": sum(s) / len(s), "p50": order_stat(s, 0.50),
            "p99": order_stat(s, 0.99), "max": s[-1]}


def throughput_bps(c: MetricCounters, port: Optional[int] = None,
                   window: Optional[tuple[int, int]] = None) -> float:
    """Transmitted bits per second over a window of whole milliseconds."""
    ports = range(c.n_ports) if port is None else [port]
    if window is None:
        window = (0, (c.last_time // 1_000_000 + 1) * 1_000_000)
    t0, t1 = window
    b0, b1 = t0 // 1_000_000, -(-t1 // 1_000_000)
    total = sum(v for p in ports for ms, v in c.tx_ms_bytes[p].items() if b0 <= ms < b1)
    return total * 8 * 1e9 / max(1, t1 - t0)


def _trailing_rate(times: deque, now: int) -> float:
    while times and times[0] <= now - RATE_WINDOW_NS:
        times.popleft()
    return len([t for t in times if t <= now]) * 1e9 / RATE_WINDOW_NS


def status_snapshot(c: MetricCounters, now: int, rx_fullness=None, tx_fullness=None) -> list[dict]:
    """Per-device and per-port status rows: buffer fullness, packet counts
    and packets/sec over the trailing millisecond."""
    rx_fullness = rx_fullness or [0] * N_INGRESS
    tx_fullness = tx_fullness or [0] * c.n_ports
    rx_counts = [c.total(ARRIVE, port=p) for p in range(N_INGRESS)]
    rx_rates = [_trailing_rate(c._recent_rx[p], now) for p in range(N_INGRESS)]
    tx_counts = [c.total(TX, port=p) for p in range(c.n_ports)]
    tx_rates = [_trailing_rate(c._recent_tx[p], now) for p in range(c.n_ports)]
    rows = [{"device": "Device ID 0 (Rx)", "rx_fullness": sum(rx_fullness), "tx_fullness": None,
             "packets_recd": sum(rx_counts), "receive_rate": sum(rx_rates),
             "packets_sent": None, "transmit_rate": None}]
    for p in range(N_INGRESS):
        rows.append({"device": f"Port {p} (Rx)", "rx_fullness": rx_fullness[p], "tx_fullness": None,
                     "packets_recd": rx_counts[p], "receive_rate": rx_rates[p],
                     "packets_sent": None, "transmit_rate": None})
    rows.append({"device": "Device ID 1 (Tx)", "rx_fullness": None, "tx_fullness": sum(tx_fullness),
                 "packets_recd": None, "receive_rate": None,
                 "packets_sent": sum(tx_counts), "transmit_rate": sum(tx_rates)})
    for p in range(c.n_ports):
        rows.append({"device": f"Port {p} (Tx)", "rx_fullness": None, "tx_fullness": tx_fullness[p],
                     "packets_recd": None, "receive_rate": None,
                     "packets_sent": tx_counts[p], "transmit_rate": tx_rates[p]})
    return rows


# ---- event log --------------------------------------------------------------

def format_event(time: int, pid: int, kind: str, cls=None, port: Optional[int] = None) -> str:
    return f"{time} {pid} {kind} {_cls_name(cls)} {'-' if port is None else port}"


def parse_event(line: str) -> tuple:
    t, pid, kind, cls, port = line.split()
    if kind not in EVENT_KINDS:
        raise ValueError(f"unknown event kind {kind!r}")
    return (int(t), int(pid), kind, None if cls == "-" else TrafficClass[cls],
            None if port == "-" else int(port))


def replay(lines: Iterable[str], n_ports: int = 5) -> MetricCounters:
    c = MetricCounters(n_ports)
    for line in lines:
        if line.strip():
            c.record(*parse_event(line))
    return c


# ---- export -------------------------------------------------------------------

CSV_FIELDS = ("class", "port", "fate", "packets", "bytes")


def to_csv(c: MetricCounters, out: Optional[TextIO] = None) -> str:
    buf = out or io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for (name, port, fate), (n, b) in c.fate_table().items():
        w.writerow((name, "-" if port < 0 else port, fate, n, b))
    return buf.getvalue() if out is None else ""


def summary(c: MetricCounters, window: Optional[tuple[int, int]] = None) -> dict:
    classes = {}
    for cls in sorted(TrafficClass, reverse=True):
        name = cls.name
        classes[name] = {
            "offered": len(c.offer_times.get(name, [])),
            "dropped": len(c.drop_times.get(name, [])),
            "loss_rate": loss_rate(c, cls),
            "delay_ns": delay_stats(c, cls),
        }
    ports = {}
    for p in range(c.n_ports):
        ports[str(p)] = {"tx_packets": c.total(TX, port=p),
                         "tx_bytes": sum(c.tx_ms_bytes[p].values()),
                         "throughput_bps": throughput_bps(c, p, window)}
    fates = {FATE_OF[k]: c.total(k) for k in TERMINAL_KINDS}
    return {
        "meta": dict(c.meta),
        "generated": c.generated,
        "fates": fates,
        "classes": classes,
        "ports": ports,
        "throughput_bps": throughput_bps(c, None, window),
    }
