"""Packets, flows, traffic classes and 64-byte mpacket segmentation.

All simulated time is integer nanoseconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional

ELEMENT_BYTES = 64
MIN_PACKET_BYTES = 20
MASK64 = (1 << 64) - 1


class Protocol(Enum):
    TCP = "TCP"
    UDP = "UDP"
    RTP_UDP = "RTP_UDP"


class TrafficClass(IntEnum):
    """DiffServ-style class; larger value means higher priority."""

    BE = 0
    AF = 1
    EF = 2
    PRIV = 3


class Fate(Enum):
    IN_FLIGHT = "InFlight"
    TRANSMITTED = "Transmitted"
    DROPPED_QUEUE_FULL = "DroppedQueueFull"
    DROPPED_DEFERRED_FULL = "DroppedDeferredFull"
    DROPPED_TTL = "DroppedTTL"
    DROPPED_RED = "DroppedRed"

    @property
    def terminal(self) -> bool:
        return self is not Fate.IN_FLIGHT

    @property
    def dropped(self) -> bool:
        return self.value.startswith("Dropped")


DROP_FATES = tuple(f for f in Fate if f.dropped)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


_PROTO_CODE = {Protocol.TCP: 6, Protocol.UDP: 17, Protocol.RTP_UDP: 0x91}


@dataclass(frozen=True)
class FlowKey:
    src_addr: int
    dst_addr: int
    src_port: int
    dst_port: int
    protocol: Protocol

    _h: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name, bits in (("src_addr", 32), ("dst_addr", 32), ("src_port", 16), ("dst_port", 16)):
            v = getattr(self, name)
            if not 0 <= v < (1 << bits):
                raise ValueError(f"{name}={v} out of range for {bits}-bit field")
        object.__setattr__(self, "_h", self.hash64())

    def __hash__(self) -> int:
        return self._h

    def hash64(self) -> int:
        """Pinned 64-bit mix of the 5-tuple (stable across runs and hosts)."""
        h = splitmix64((self.src_addr << 32) | self.dst_addr)
        h = splitmix64(h ^ ((self.src_port << 32) | (self.dst_port << 16) | _PROTO_CODE[self.protocol]))
        return h

    def __str__(self) -> str:
        return (f"{self.src_addr:08x}:{self.src_port}>{self.dst_addr:08x}:{self.dst_port}"
                f"/{self.protocol.value}")


class Packet:
    """A packet and its lifecycle. ``fate`` is write-once once terminal."""

    __slots__ = ("id", "flow", "size_bytes", "ttl", "cls", "capsule", "t_created",
                 "t_enqueued", "t_departed", "_fate", "port", "redirected", "kind", "ingress")

    def __init__(self, id: int, flow: FlowKey, size_bytes: int, ttl: int = 64,
                 capsule=None, t_created: Optional[int] = None, kind=None):
        if size_bytes < 1:
            raise ValueError(f"malformed packet: size_bytes={size_bytes}")
        if not 0 <= ttl <= 255:
            raise ValueError(f"ttl={ttl} not an 8-bit value")
        self.id = id
        self.flow = flow
        self.size_bytes = size_bytes
        self.ttl = ttl
        self.cls: Optional[TrafficClass] = None
        self.capsule = capsule
        self.t_created = t_created
        self.t_enqueued: Optional[int] = None
        self.t_departed: Optional[int] = None
        self._fate = Fate.IN_FLIGHT
        self.port: Optional[int] = None
        self.redirected = False
        self.kind = kind
        self.ingress = 0

    @property
    def fate(self) -> Fate:
        return self._fate

    @fate.setter
    def fate(self, value: Fate) -> None:
        if self._fate.terminal:
            raise RuntimeError(f"packet {self.id}: fate already {self._fate.value}, "
                               f"cannot become {value.value}")
        self._fate = value

    @property
    def n_elems(self) -> int:
        return elems(self.size_bytes)

    def __repr__(self) -> str:
        cls = self.cls.name if self.cls is not None else "-"
        return f"Packet(id={self.id}, {self.size_bytes}B, {cls}, {self._fate.value})"


@dataclass(frozen=True)
class MPacket:
    parent_id: int
    index: int
    payload_bytes: int
    sop: bool
    eop: bool


class ReassemblyError(ValueError):
    pass


def elems(size_bytes: int, element_size: int = ELEMENT_BYTES) -> int:
    """Buffer elements needed for ``size_bytes`` (ceiling division)."""
    return -(-size_bytes // element_size)


def serialization_ns(size_bytes: int, rate_bps: int) -> int:
    """Wire time of ``size_bytes`` at ``rate_bps``, rounded half up to whole ns."""
    num = size_bytes * 8 * 1_000_000_000
    return (2 * num + rate_bps) // (2 * rate_bps)


def segment_packet(p: Packet, element_size: int = ELEMENT_BYTES) -> list[MPacket]:
    if p.size_bytes < 1:
        raise ValueError(f"malformed packet {p.id}: zero size")
    if element_size < 1:
        raise ValueError("element_size must be >= 1")
    n = elems(p.size_bytes, element_size)
    out = []
    for i in range(n):
        payload = element_size if i < n - 1 else p.size_bytes - element_size * (n - 1)
        out.append(MPacket(p.id, i, payload, i == 0, i == n - 1))
    return out


def reassemble(segments: list[MPacket]) -> tuple[int, int]:
    """Return ``(packet_id, total_bytes)``; raises ReassemblyError on a bad chain."""
    if not segments:
        raise ReassemblyError("no segments")
    pid = segments[0].parent_id
    total = 0
    for expected, seg in enumerate(segments):
        if seg.parent_id != pid:
            raise ReassemblyError(f"segment of packet {seg.parent_id} mixed into {pid}")
        if seg.index != expected:
            raise ReassemblyError(f"packet {pid}: expected index {expected}, got {seg.index}")
        if seg.sop != (expected == 0):
            raise ReassemblyError(f"packet {pid}: bad sop flag at index {expected}")
        last = expected == len(segments) - 1
        if seg.eop != last:
            raise ReassemblyError(f"packet {pid}: bad eop flag at index {expected}")
        total += seg.payload_bytes
    return pid, total
