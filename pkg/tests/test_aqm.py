import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from np_aqm.aqm import (AnAqm, EgressQueue, Red, RedState, Verdict, VerdictKind, anaqm_enqueue,
                        apply_verdict, drain_deferred, droptail_enqueue, red_enqueue, red_update_avg)
from np_aqm.core import Fate, TrafficClass
from np_aqm.scheduler import select_next
from tests.conftest import make_packet

LOW = (1, 2, 3, 4)


def fill(q, n_elems, cls=TrafficClass.BE, start_id=10_000):
    for i in range(n_elems):
        q.push(make_packet(start_id + i, 64, cls))


def queues(n=5, **kw):
    return [EgressQueue(p, **kw) for p in range(n)]


# ---- drop-tail -------------------------------------------------------------

def test_droptail_examples():
    q = EgressQueue(0)
    p = make_packet(1, 64, TrafficClass.BE)
    v = droptail_enqueue(q, p)
    assert v == Verdict.accept(0)
    apply_verdict([q], p, v, 0)
    assert q.occupancy_elems == 1

    full = EgressQueue(0)
    fill(full, 128)
    assert droptail_enqueue(full, make_packet(2)) == Verdict.drop(Fate.DROPPED_QUEUE_FULL, 0)

    q127 = EgressQueue(0)
    fill(q127, 127)
    assert droptail_enqueue(q127, make_packet(3, 128)).kind is VerdictKind.DROP


def test_push_beyond_capacity_is_a_bug():
    q = EgressQueue(0, capacity_elems=1)
    fill(q, 1)
    with pytest.raises(RuntimeError):
        fill(q, 1, start_id=5)


# ---- RED --------------------------------------------------------------------

def red_state(**kw):
    base = dict(min_th=20, max_th=80, w_q=0.5, max_p=0.1, typical_ns=100)
    base.update(kw)
    return RedState(**base)


def test_red_avg_one_step():
    s = red_state(avg=0.0)
    q = EgressQueue(0)
    fill(q, 10)
    assert red_update_avg(s, q, 0) == 5.0


def test_red_avg_fixed_point():
    s = red_state(avg=8.0, w_q=0.002)
    q = EgressQueue(0)
    fill(q, 8)
    assert red_update_avg(s, q, 0) == pytest.approx(8.0, abs=1e-12)


def test_red_idle_decay():
    s = red_state(avg=8.0, typical_ns=3303)
    q = EgressQueue(0)
    q.idle_since = 1000
    expected = 8.0 * (1 - 0.5) ** 3  # oracle: (1-w)^m * avg
    assert expected == 1.0
    assert red_update_avg(s, q, 1000 + 3 * 3303) == pytest.approx(expected)


def test_red_below_min_accepts():
    s = red_state(avg=10.0)
    assert red_enqueue(s, EgressQueue(0), make_packet(1), random.Random(0)) == Verdict.accept(0)
    assert s.count == -1


def test_red_above_max_drops():
    s = red_state(avg=90.0)
    v = red_enqueue(s, EgressQueue(0), make_packet(1), random.Random(0))
    assert v == Verdict.drop(Fate.DROPPED_RED, 0)


def test_red_band_probability_monte_carlo():
    s = red_state(avg=50.0)
    s.count = 0
    assert s.drop_probability() == pytest.approx(0.05)
    rng = random.Random(123)
    q = EgressQueue(0)
    drops = 0
    for _ in range(100_000):
        s.count = -1  # incremented to 0 inside the decision
        drops += red_enqueue(s, q, make_packet(1), rng).kind is VerdictKind.DROP
    assert abs(drops / 100_000 - 0.05) <= 0.005


def test_red_count_raises_probability_and_clamps():
    s = red_state(avg=50.0)
    s.count = 10
    assert s.drop_probability() == pytest.approx(0.05 / (1 - 0.5))
    s.count = 25
    assert s.drop_probability() == 1.0


def test_red_full_queue_drops_regardless():
    s = red_state(avg=0.0)
    q = EgressQueue(0, capacity_elems=4)
    fill(q, 4)
    s.avg = 0.0
    assert red_enqueue(s, q, make_packet(1), random.Random(0)) == Verdict.drop(Fate.DROPPED_QUEUE_FULL, 0)


def test_red_state_validation():
    with pytest.raises(ValueError):
        red_state(w_q=0)
    with pytest.raises(ValueError):
        red_state(max_p=1.5)
    with pytest.raises(ValueError):
        red_state(min_th=80, max_th=20)


@settings(max_examples=100)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=300), st.integers(0, 2**32))
def test_red_below_min_never_drops(occupancies, seed):
    qs = queues(1)
    red = Red(qs, [3303], random.Random(seed), w_q=0.3)
    q = qs[0]
    for t, occ in enumerate(occupancies):
        q.occupancy_elems = occ
        q.idle_since = None if occ else t
        v = red.enqueue(make_packet(t), 0, t * 1000)
        assert v.kind is VerdictKind.ACCEPT


# ---- priority-overflow AQM ---------------------------------------------------

def test_anaqm_ef_above_soft_still_accepted():
    qs = queues()
    fill(qs[0], 110, TrafficClass.EF)  # 86 %
    assert anaqm_enqueue(qs, make_packet(1, cls=TrafficClass.EF), 0, LOW) == Verdict.accept(0)


def test_anaqm_ef_full_redirects_least_occupied():
    qs = queues()
    fill(qs[0], 128, TrafficClass.EF)
    fill(qs[1], 120, TrafficClass.AF)
    fill(qs[2], 120, TrafficClass.AF, start_id=20_000)
    fill(qs[3], 13)   # 10 %
    fill(qs[4], 51, start_id=30_000)  # 40 %
    assert anaqm_enqueue(qs, make_packet(1, cls=TrafficClass.EF), 0, LOW) == Verdict.redirect(0, 3)


def test_anaqm_redirect_tie_lowest_port():
    qs = queues()
    fill(qs[0], 128, TrafficClass.EF)
    for p in LOW:
        fill(qs[p], 30, start_id=1000 * p)
    assert anaqm_enqueue(qs, make_packet(1, cls=TrafficClass.PRIV), 0, LOW) == Verdict.redirect(0, 1)


def test_anaqm_ef_dropped_only_when_everything_full():
    qs = queues()
    for p in range(5):
        fill(qs[p], 128, start_id=1000 * p)
    v = anaqm_enqueue(qs, make_packet(1, cls=TrafficClass.EF), 0, LOW)
    assert v == Verdict.drop(Fate.DROPPED_QUEUE_FULL, 0)


def test_anaqm_low_priority_defer_then_drop():
    qs = queues()
    q = qs[3]
    fill(q, 115)  # 90 %
    for _ in range(512):
        p = make_packet(1, cls=TrafficClass.BE)
        v = anaqm_enqueue(qs, p, 3, LOW)
        assert v == Verdict.defer(3)
        apply_verdict(qs, p, v, 0)
    assert not q.admitting and len(q.deferred) == 512
    assert anaqm_enqueue(qs, make_packet(2, cls=TrafficClass.BE), 3, LOW) == \
        Verdict.drop(Fate.DROPPED_DEFERRED_FULL, 3)


def test_anaqm_not_admitting_defers_even_below_threshold():
    qs = queues()
    qs[1].admitting = False
    assert anaqm_enqueue(qs, make_packet(1, cls=TrafficClass.AF), 1, LOW) == Verdict.defer(1)


def test_drain_deferred_promotes_to_threshold():
    q = EgressQueue(3)
    assert q.soft_threshold_elems == 108
    fill(q, 109)
    q.admitting = False
    for i in range(3):
        q.deferred.append(make_packet(i, cls=TrafficClass.BE))
    assert drain_deferred(q) == []
    # transmit two: occupancy 107
    for _ in range(2):
        q.release(select_next(q), 0)
    promoted = drain_deferred(q)
    assert [p.id for p in promoted] == [0]
    assert q.occupancy_elems == 108 and len(q.deferred) == 2 and not q.admitting


def test_drain_deferred_empty_restores_admission():
    q = EgressQueue(3)
    q.admitting = False
    assert drain_deferred(q) == [] and q.admitting


ops = st.lists(st.tuples(st.sampled_from(["offer", "offer", "offer", "tx"]),
                         st.sampled_from(list(TrafficClass)), st.integers(0, 4),
                         st.sampled_from([64, 64, 128, 300])), max_size=600)


@settings(max_examples=60, deadline=None)
@given(ops)
def test_anaqm_invariants(seq):
    qs = queues(capacity_elems=16, deferred_capacity=8)
    pol = AnAqm(qs, LOW)
    tally = {k: 0 for k in VerdictKind}
    offered = 0
    deferred_in = deferred_drops = promoted = 0
    for i, (op, cls, port, size) in enumerate(seq):
        if op == "tx":
            q = qs[port]
            pkt = select_next(q)
            if pkt is not None:
                q.release(pkt, i)
                promoted += len(drain_deferred(q))
            continue
        target = 0 if cls >= TrafficClass.EF else port
        p = make_packet(i, size, cls)
        v = pol.enqueue(p, target, i)
        offered += 1
        tally[v.kind] += 1
        if v.kind is VerdictKind.DROP and cls >= TrafficClass.EF:
            assert all(not q.fits(p) for q in qs)
        if v.kind is VerdictKind.DEFER:
            deferred_in += 1
        if v.kind is VerdictKind.DROP and v.reason is Fate.DROPPED_DEFERRED_FULL:
            deferred_drops += 1
        apply_verdict(qs, p, v, i)
        for q in qs:
            assert 0 <= q.occupancy_elems <= q.capacity_elems
            assert len(q.deferred) <= q.deferred_capacity
            assert q.soft_threshold_elems <= q.capacity_elems
    assert sum(tally.values()) == offered
    resident = sum(len(q.deferred) for q in qs)
    assert deferred_in + deferred_drops == promoted + deferred_drops + resident


def test_verdict_str():
    assert str(Verdict.redirect(0, 3)) == "Redirect(0->3)"
    assert str(Verdict.drop(Fate.DROPPED_RED)) == "Drop(DroppedRed)"
    assert str(Verdict.accept(2)) == "Accept(2)"


def test_soft_threshold_validation():
    with pytest.raises(ValueError):
        EgressQueue(0, soft_fraction=0)
    assert EgressQueue(0, soft_fraction=1.0).soft_threshold_elems == 128
