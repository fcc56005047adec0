"""Fill one high-priority and one low-priority port packet by packet and print
where the priority-overflow policy changes its verdict."""

from np_aqm.aqm import AnAqm, EgressQueue, apply_verdict
from np_aqm.core import FlowKey, Packet, Protocol, TrafficClass


def fill(cls, port, n):
    queues = [EgressQueue(p) for p in range(5)]
    pol = AnAqm(queues, (1, 2, 3, 4))
    flow = FlowKey(0x0A000001, 0xC0A80001, 5004, 5004, Protocol.RTP_UDP)
    last = None
    for i in range(n):
        q = queues[port]
        occ, deferred = q.occupancy_elems, len(q.deferred)
        pkt = Packet(i, flow, 64)
        pkt.cls = cls
        v = pol.enqueue(pkt, port, i)
        apply_verdict(queues, pkt, v, i)
        label = (v.kind, v.reason, occ >= q.soft_threshold_elems)
        if label != last:
            print(f"  packet {i:4d}: occupancy {occ:3d}/{q.capacity_elems} deferred {deferred:3d} -> {v}")
            last = label


if __name__ == "__main__":
    print("EF into port 0 (soft threshold 108 elements):")
    fill(TrafficClass.EF, 0, 200)
    print("BE into port 3:")
    fill(TrafficClass.BE, 3, 700)
