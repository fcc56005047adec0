"""Flow-table classification with a periodic idle sweep, plus capsule directives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from np_aqm.core import Fate, FlowKey, Packet, Protocol, TrafficClass

N_EGRESS_PORTS = 5

DEFAULT_CLASS_TO_PORT = {
    TrafficClass.PRIV: (0,),
    TrafficClass.EF: (0,),
    TrafficClass.AF: (1, 2),
    TrafficClass.BE: (3, 4),
}

PROTOCOL_CLASS = {
    Protocol.RTP_UDP: TrafficClass.EF,
    Protocol.UDP: TrafficClass.AF,
    Protocol.TCP: TrafficClass.BE,
}

CAPSULE_KINDS = ("SetFlowPriority", "SetPortThreshold", "Trace")


@dataclass
class RoutingPolicy:
    class_to_port: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_TO_PORT))
    n_ports: int = N_EGRESS_PORTS

    def validate(self) -> None:
        from np_aqm.traffic import ConfigError

        for cls in TrafficClass:
            ports = self.class_to_port.get(cls)
            if not ports:
                raise ConfigError(f"classifier.map.{cls.name}", "every class needs >= 1 port")
            for p in ports:
                if not 0 <= p < self.n_ports:
                    raise ConfigError(f"classifier.map.{cls.name}",
                                      f"port {p} outside 0..{self.n_ports - 1}")

    def high_ports(self) -> set:
        return set(self.class_to_port[TrafficClass.PRIV]) | set(self.class_to_port[TrafficClass.EF])

    def low_ports(self) -> list:
        return [p for p in range(self.n_ports) if p not in self.high_ports()]


@dataclass
class FlowTableEntry:
    key: FlowKey
    cls: TrafficClass
    egress_port: int
    last_hit: int
    hits: int = 0


@dataclass
class CapsuleDirective:
    """A directive carried by an active packet. ``args`` stay as wire strings;
    they are validated when the directive is applied."""

    kind: str
    args: dict = field(default_factory=dict)
    target: Optional[FlowKey] = None
    trace_log: list = field(default_factory=list)

    def to_wire(self) -> str:
        parts = ["CAPSULE", self.kind] + [f"{k}={v}" for k, v in self.args.items()]
        return " ".join(parts)


def parse_capsule(line: str) -> CapsuleDirective:
    """Parse ``CAPSULE <kind> key=value ...``. Unknown kinds are kept as-is so
    the receiving node can ignore them."""
    parts = line.split()
    if len(parts) < 2 or parts[0] != "CAPSULE":
        raise ValueError(f"not a capsule line: {line!r}")
    args = {}
    for tok in parts[2:]:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError(f"capsule argument {tok!r} is not key=value")
        args[k] = v
    return CapsuleDirective(parts[1], args)


class Classifier:
    def __init__(self, policy: Optional[RoutingPolicy] = None, refresh_interval_ns: int = 50_000_000,
                 max_entries: int = 65_536, node_id: str = "np0"):
        self.policy = policy or RoutingPolicy()
        self.policy.validate()
        self.refresh_interval_ns = refresh_interval_ns
        self.max_entries = max_entries
        self.node_id = node_id
        self.table: dict[FlowKey, FlowTableEntry] = {}
        self.overrides: dict[FlowKey, TrafficClass] = {}
        # per-port (tx_count, occupancy) as last reported by the transmit stage
        self.load_view = [(0, 0) for _ in range(self.policy.n_ports)]
        self.hits = 0
        self.misses = 0
        self.evictions = 0
        self.applied_capsules = 0
        self.ignored_capsules = 0
        self.feedback_updates = 0
        # egress queues, needed by SetPortThreshold; wired by the simulator
        self.queues = None

    def class_for(self, key: FlowKey) -> TrafficClass:
        return self.overrides.get(key, PROTOCOL_CLASS[key.protocol])

    def pick_port(self, cls: TrafficClass) -> int:
        ports = self.policy.class_to_port[cls]
        return min(ports, key=lambda p: (self.load_view[p][1], p))

    def slow_path(self, pkt: Packet, now: int) -> FlowTableEntry:
        cls = TrafficClass.BE if pkt.capsule is not None else self.class_for(pkt.flow)
        entry = FlowTableEntry(pkt.flow, cls, self.pick_port(cls), now)
        if len(self.table) >= self.max_entries:
            stalest = min(self.table.values(), key=lambda e: e.last_hit)
            del self.table[stalest.key]
            self.evictions += 1
        self.table[pkt.flow] = entry
        return entry

    def classify(self, pkt: Packet, now: int) -> Optional[tuple[TrafficClass, int]]:
        """Assign (class, egress port), or return None after marking a TTL drop."""
        if pkt.ttl <= 1:
            pkt.ttl = 0
            pkt.fate = Fate.DROPPED_TTL
            return None
        pkt.ttl -= 1
        if pkt.capsule is not None:
            self.apply_capsule(pkt.capsule)
        entry = self.table.get(pkt.flow)
        if entry is None:
            self.misses += 1
            entry = self.slow_path(pkt, now)
        else:
            self.hits += 1
            entry.hits += 1
            entry.last_hit = now
        pkt.cls = entry.cls
        return entry.cls, entry.egress_port

    def refresh_table(self, now: int) -> int:
        stale = [k for k, e in self.table.items() if now - e.last_hit > self.refresh_interval_ns]
        for k in stale:
            del self.table[k]
        self.evictions += len(stale)
        return len(stale)

    def update_load(self, port: int, tx_count: int, occupancy: int) -> None:
        self.load_view[port] = (tx_count, occupancy)
        self.feedback_updates += 1

    def apply_capsule(self, d: CapsuleDirective, queues=None) -> bool:
        """Execute a directive against this node; False means it was ignored."""
        queues = queues if queues is not None else self.queues
        try:
            if d.kind == "SetFlowPriority":
                level = TrafficClass[d.args["level"]]
                if d.target is None:
                    raise ValueError("unresolved target flow")
                self.overrides[d.target] = level
                entry = self.table.get(d.target)
                if entry is not None:
                    entry.cls = level
                    if entry.egress_port not in self.policy.class_to_port[level]:
                        entry.egress_port = self.pick_port(level)
            elif d.kind == "SetPortThreshold":
                port = int(d.args["port"])
                fraction = float(d.args["fraction"])
                if queues is None or not 0 <= port < len(queues):
                    raise ValueError(f"no such port {port}")
                queues[port].set_soft_fraction(fraction)
            elif d.kind == "Trace":
                d.trace_log.append(self.node_id)
            else:
                raise ValueError(f"unknown capsule kind {d.kind!r}")
        except (KeyError, ValueError):
            self.ignored_capsules += 1
            return False
        self.applied_capsules += 1
        return True
