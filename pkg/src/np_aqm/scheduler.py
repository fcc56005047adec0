"""Strict-priority selection and link serialization for the egress ports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from np_aqm.aqm import EgressQueue
from np_aqm.core import Packet, TrafficClass, serialization_ns
from np_aqm.engine import SimulationError

# highest first
PRIORITY_ORDER = sorted(TrafficClass, reverse=True)


@dataclass
class PortLink:
    port: int
    rate_bps: int = 155_000_000
    busy_until: int = 0
    tx_count: int = 0
    tx_bytes: int = 0
    busy: bool = False

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError(f"port {self.port}: rate_bps must be positive")


def select_next(q: EgressQueue) -> Optional[Packet]:
    """Pop the head of the highest non-empty class (PRIV > EF > AF > BE)."""
    for cls in PRIORITY_ORDER:
        if q.class_depth(cls):
            return q.pop_class(cls)
    return None


def transmit(pkt: Packet, link: PortLink, now: int) -> int:
    """Start serializing ``pkt``; returns the completion time."""
    if link.busy or now < link.busy_until:
        raise SimulationError(f"port {link.port}: transmit while busy until {link.busy_until}")
    link.busy = True
    link.busy_until = now + serialization_ns(pkt.size_bytes, link.rate_bps)
    return link.busy_until


def complete(pkt: Packet, link: PortLink) -> None:
    link.busy = False
    link.tx_count += 1
    link.tx_bytes += pkt.size_bytes


def publish_tx_feedback(link: PortLink, q: EgressQueue, classifier, every_n: int = 16) -> bool:
    """Report (tx_count, occupancy) to the classifier on every n-th transmission."""
    if link.tx_count and link.tx_count % every_n == 0:
        classifier.update_load(link.port, link.tx_count, q.occupancy_elems)
        return True
    return False
