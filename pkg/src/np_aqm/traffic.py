"""Seeded constant-rate workload of RTP/UDP, UDP (large/small TTL) and TCP flows."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, NamedTuple, Optional

from np_aqm.core import MIN_PACKET_BYTES, FlowKey, Packet, Protocol, serialization_ns


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending field."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


class PacketKind(Enum):
    RTP_UDP = "RTP_UDP"
    UDP_LARGE_TTL = "UDP_LARGE_TTL"
    UDP_SMALL_TTL = "UDP_SMALL_TTL"
    TCP = "TCP"

    @property
    def protocol(self) -> Protocol:
        return {PacketKind.RTP_UDP: Protocol.RTP_UDP, PacketKind.TCP: Protocol.TCP}.get(
            self, Protocol.UDP)


DEFAULT_MIX = tuple((k, 1.0) for k in PacketKind)
_DST_PORT = {PacketKind.RTP_UDP: 5004, PacketKind.UDP_LARGE_TTL: 4000,
             PacketKind.UDP_SMALL_TTL: 4001, PacketKind.TCP: 80}


def substream(seed: int, name: str) -> random.Random:
    """Independent named PRNG stream derived from the scenario seed.

    Pinned: blake2b(seed, name) seeds a Mersenne Twister, and callers draw
    only through ``random()``, whose output sequence CPython guarantees.
    """
    digest = hashlib.blake2b(f"{seed}/{name}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


def below(rng: random.Random, n: int) -> int:
    """Uniform integer in [0, n) built on ``random()`` only."""
    return min(int(rng.random() * n), n - 1)


@dataclass(frozen=True)
class SizeModel:
    lo: int = 64
    hi: int = 64

    @property
    def fixed(self) -> bool:
        return self.lo == self.hi

    def draw(self, rng: random.Random) -> int:
        if self.fixed:
            return self.lo
        return self.lo + below(rng, self.hi - self.lo + 1)

    def __str__(self) -> str:
        return f"fixed:{self.lo}" if self.fixed else f"uniform:{self.lo}:{self.hi}"

    @classmethod
    def parse(cls, text: str) -> "SizeModel":
        parts = text.strip().split(":")
        try:
            if parts[0] == "fixed" and len(parts) == 2:
                return cls(int(parts[1]), int(parts[1]))
            if parts[0] == "uniform" and len(parts) == 3:
                return cls(int(parts[1]), int(parts[2]))
        except ValueError:
            pass
        raise ConfigError("traffic.size", f"expected fixed:<n> or uniform:<lo>:<hi>, got {text!r}")


@dataclass(frozen=True)
class TrafficConfig:
    aggregate_rate_bps: int = 1_000_000_000
    inter_packet_gap_ns: int = 96
    flow_count: int = 64
    start_window_ns: int = 40_000_000
    mix: tuple = DEFAULT_MIX
    size_model: SizeModel = field(default_factory=SizeModel)
    duration_ns: int = 60_000_000
    seed: int = 1
    ingress: str = "flow_hash"
    small_ttl_max: int = 4
    large_ttl_min: int = 64
    default_ttl: int = 64

    def validate(self) -> None:
        if self.aggregate_rate_bps <= 0:
            raise ConfigError("traffic.aggregate_rate_bps", "must be > 0")
        if self.inter_packet_gap_ns < 0:
            raise ConfigError("traffic.inter_packet_gap_ns", "must be >= 0")
        if self.flow_count < 1:
            raise ConfigError("traffic.flow_count", "must be a positive integer")
        if self.duration_ns < 0:
            raise ConfigError("duration_ns", "must be >= 0")
        if not 0 <= self.start_window_ns <= self.duration_ns:
            raise ConfigError("traffic.start_window_ns", "must lie in [0, duration_ns]")
        if not self.mix:
            raise ConfigError("traffic.mix", "needs at least one kind")
        for kind, w in self.mix:
            if not isinstance(kind, PacketKind):
                raise ConfigError("traffic.mix", f"unknown packet kind {kind!r}")
            if not w > 0:
                raise ConfigError("traffic.mix", f"weight of {kind.value} must be positive")
        if self.flow_count < len(self.mix):
            raise ConfigError("traffic.flow_count", "must be at least the number of mix kinds")
        sm = self.size_model
        if sm.lo < MIN_PACKET_BYTES or sm.hi < sm.lo:
            raise ConfigError("traffic.size", f"sizes must satisfy {MIN_PACKET_BYTES} <= lo <= hi")
        if self.ingress not in ("flow_hash", "alternate"):
            raise ConfigError("traffic.ingress", "must be flow_hash or alternate")
        if not 1 <= self.small_ttl_max < self.large_ttl_min <= 255:
            raise ConfigError("traffic.small_ttl_max", "need 1 <= small_ttl_max < large_ttl_min <= 255")
        if not 1 <= self.default_ttl <= 255:
            raise ConfigError("traffic.default_ttl", "must be in [1, 255]")


class ArrivalEvent(NamedTuple):
    at: int
    packet: Packet
    ingress_port: int


@dataclass
class Flow:
    index: int
    key: FlowKey
    kind: PacketKind
    start_ns: int


def apportion(weights: list[float], total: int) -> list[int]:
    """Largest-remainder split of ``total`` by ``weights``, at least 1 each."""
    s = sum(weights)
    raw = [w * total / s for w in weights]
    counts = [max(1, int(r)) for r in raw]
    order = sorted(range(len(weights)), key=lambda i: (-(raw[i] - int(raw[i])), i))
    i = 0
    while sum(counts) < total:
        counts[order[i % len(order)]] += 1
        i += 1
    while sum(counts) > total:
        j = max(range(len(counts)), key=lambda k: (counts[k], -k))
        counts[j] -= 1
    return counts


class Generator:
    """Stateful single-consumer arrival source.

    Arrivals sit on a constant-rate grid: each packet is followed by its own
    serialization time at the aggregate rate plus the inter-packet gap. Each
    slot draws a packet kind by weight (among kinds that already have a
    started flow) and then a started flow of that kind uniformly.
    """

    CAPSULE_FLOW_BASE = 0x0AFF0000

    def __init__(self, cfg: TrafficConfig, capsules=()):
        cfg.validate()
        self.cfg = cfg
        self._rng = substream(cfg.seed, "traffic")
        self.flows = self._make_flows()
        self._by_start = sorted(self.flows, key=lambda f: (f.start_ns, f.index))
        self._next_start = 0
        self._kinds = [k for k, _ in cfg.mix]
        self._weights = [w for _, w in cfg.mix]
        self._kind_index = {k: i for i, k in enumerate(self._kinds)}
        self._started: list[list[Flow]] = [[] for _ in self._kinds]
        self._live: list[int] = []
        self._capsules = sorted(capsules, key=lambda c: c[0])
        self._next_capsule = 0
        self._next_id = 0
        self._t = self._by_start[0].start_ns
        self._alt = 0
        self.emitted = 0
        self.capsule_flow = FlowKey(self.CAPSULE_FLOW_BASE, 0xC0A80001, 7000, 7000, Protocol.TCP)

    def _make_flows(self) -> list[Flow]:
        cfg, rng = self.cfg, self._rng
        counts = apportion([w for _, w in cfg.mix], cfg.flow_count)
        pool = [k for (k, _), c in zip(cfg.mix, counts) for _ in range(c)]
        # interleave kinds so flow index does not encode kind in blocks
        kinds = []
        buckets = {k: [x for x in pool if x is k] for k, _ in cfg.mix}
        while any(buckets.values()):
            for k, _ in cfg.mix:
                if buckets[k]:
                    kinds.append(buckets[k].pop())
        flows = []
        for i, kind in enumerate(kinds):
            start = below(rng, cfg.start_window_ns) if cfg.start_window_ns > 0 else 0
            key = FlowKey(0x0A000001 + i, 0xC0A80001 + below(rng, 254),
                          1024 + below(rng, 60000), _DST_PORT[kind], kind.protocol)
            flows.append(Flow(i, key, kind, start))
        return flows

    @property
    def all_kinds_live(self) -> bool:
        """True once every kind in the mix has at least one started flow."""
        return len(self._live) == len(self._kinds)

    def ingress_port(self, key: FlowKey) -> int:
        if self.cfg.ingress == "alternate":
            self._alt ^= 1
            return self._alt ^ 1
        return key._h & 1

    def _pick_flow(self) -> Flow:
        rng = self._rng
        live, weights = self._live, self._weights
        u = rng.random() * sum(weights[i] for i in live)
        kind = live[-1]
        acc = 0.0
        for i in live:
            acc += weights[i]
            if u < acc:
                kind = i
                break
        started = self._started[kind]
        return started[below(rng, len(started))]

    def _ttl(self, kind: PacketKind) -> int:
        cfg = self.cfg
        if kind is PacketKind.UDP_SMALL_TTL:
            return 1 + below(self._rng, cfg.small_ttl_max)
        if kind is PacketKind.UDP_LARGE_TTL:
            return cfg.large_ttl_min + below(self._rng, 256 - cfg.large_ttl_min)
        return cfg.default_ttl

    def next_arrival(self) -> Optional[ArrivalEvent]:
        cfg = self.cfg
        t = self._t
        if t >= cfg.duration_ns:
            return None
        while self._next_start < len(self._by_start) and self._by_start[self._next_start].start_ns <= t:
            f = self._by_start[self._next_start]
            i = self._kind_index[f.kind]
            if not self._started[i]:
                self._live = sorted(self._live + [i])
            self._started[i].append(f)
            self._next_start += 1
        pid = self._next_id
        self._next_id += 1
        if self._next_capsule < len(self._capsules) and self._capsules[self._next_capsule][0] <= t:
            directive = self._capsules[self._next_capsule][1]
            self._next_capsule += 1
            pkt = Packet(pid, self.capsule_flow, 64, cfg.default_ttl, capsule=directive, t_created=t)
        else:
            flow = self._pick_flow()
            size = cfg.size_model.draw(self._rng)
            pkt = Packet(pid, flow.key, size, self._ttl(flow.kind), t_created=t, kind=flow.kind)
        self._t = t + serialization_ns(pkt.size_bytes, cfg.aggregate_rate_bps) + cfg.inter_packet_gap_ns
        self.emitted += 1
        return ArrivalEvent(t, pkt, self.ingress_port(pkt.flow))

    def __iter__(self) -> Iterator[ArrivalEvent]:
        while (ev := self.next_arrival()) is not None:
            yield ev


def build_generator(cfg: TrafficConfig, capsules=()) -> Generator:
    return Generator(cfg, capsules)


def arrival_record(at: int, p: Packet, ingress_port: int) -> bytes:
    return f"{at} {p.id} {p.flow._h:016x} {p.size_bytes} {p.ttl} {ingress_port}\n".encode()


def arrival_digest(events) -> str:
    """SHA-256 over the observable fields of an arrival stream."""
    h = hashlib.sha256()
    for ev in events:
        p = ev.packet
        h.update(arrival_record(ev.at, p, ev.ingress_port))
    return h.hexdigest()
