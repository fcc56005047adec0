import pytest

from np_aqm.core import FlowKey, Packet, Protocol, TrafficClass

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_flow(i=1, proto=Protocol.UDP, dport=4000):
    return FlowKey(0x0A000000 + i, 0xC0A80001, 1024 + i, dport, proto)


def make_packet(pid=0, size=64, cls=None, proto=Protocol.UDP, ttl=64, flow=None, t=0):
    p = Packet(pid, flow or make_flow(pid % 1000 + 1, proto), size, ttl, t_created=t)
    p.cls = cls
    p.t_enqueued = t
    return p


@pytest.fixture
def packet_factory():
    counter = iter(range(10**9))

    def make(cls=TrafficClass.BE, size=64, t=0, **kw):
        return make_packet(next(counter), size, cls, t=t, **kw)

    return make
