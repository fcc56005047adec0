"""Discrete-event model of a network-processor forwarding pipeline with
pluggable queue management (drop-tail, RED, priority-overflow AQM)."""

from np_aqm.core import (
    ELEMENT_BYTES,
    Fate,
    FlowKey,
    MPacket,
    Packet,
    Protocol,
    ReassemblyError,
    TrafficClass,
    elems,
    reassemble,
    segment_packet,
    serialization_ns,
)

__all__ = [
    "ELEMENT_BYTES",
    "Fate",
    "FlowKey",
    "MPacket",
    "Packet",
    "Protocol",
    "ReassemblyError",
    "TrafficClass",
    "elems",
    "reassemble",
    "segment_packet",
    "serialization_ns",
]

__version__ = "0.1.0"
