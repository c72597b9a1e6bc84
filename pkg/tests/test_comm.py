import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semflow.comm import (CollectiveError, HarnessError, RoutedMessage, RoutingError, ceil_log2, crystal_route,
                          pack_arrays, spawn, unpack_arrays)


def test_spawn_returns_per_rank():
    assert spawn(1, lambda c: c.rank) == [0]
    assert spawn(4, lambda c: c.rank**2) == [0, 1, 4, 9]


def test_barrier_then_allreduce():
    def prog(c):
        c.barrier()
        return c.allreduce(c.rank, "sum")

    assert spawn(3, prog) == [3, 3, 3]


@pytest.mark.parametrize("scheduler", ["concurrent", "serial"])
def test_allreduce_examples(scheduler):
    def prog(c):
        return c.allreduce(1.0, "sum"), c.allreduce([3, 1, 4, 1][c.rank], "min")

    assert spawn(4, prog, scheduler=scheduler) == [(4.0, 1)] * 4


def test_allreduce_bitwise_fixed_order():
    rng = np.random.default_rng(5)
    vecs = rng.standard_normal((5, 100)) * 10.0 ** rng.integers(-8, 8, (5, 100))
    serial = vecs[0].copy()
    for v in vecs[1:]:
        serial = serial + v
    out = spawn(5, lambda c: c.allreduce(vecs[c.rank], "sum"))
    for o in out:
        assert np.array_equal(o, serial)


def test_allreduce_length_mismatch():
    with pytest.raises(HarnessError) as ei:
        spawn(2, lambda c: c.allreduce(np.zeros(c.rank + 1)))
    assert isinstance(ei.value.exc, CollectiveError)


def test_harness_reports_failing_rank():
    def prog(c):
        if c.rank == 2:
            raise ValueError("boom")
        c.barrier()

    with pytest.raises(HarnessError) as ei:
        spawn(4, prog)
    assert ei.value.rank == 2
    assert "boom" in str(ei.value)


def _route_prog(c, P, nmsg, seed):
    rng = np.random.default_rng([seed, c.rank])
    out = []
    for i in range(nmsg):
        d = int(rng.integers(0, P))
        out.append(RoutedMessage(d, c.rank, rng.bytes(int(rng.integers(0, 40))), int(rng.integers(0, 5))))
    inbox, stats = crystal_route(c, out)
    return out, inbox, stats


def _check_routing(P, nmsg, seed):
    res = spawn(P, _route_prog, P, nmsg, seed)
    sent = collections.Counter()
    got = collections.Counter()
    for r, (out, inbox, stats) in enumerate(res):
        for m in out:
            sent[(m.source, m.dest, m.payload, m.tag)] += 1
        for m in inbox:
            assert m.dest == r
            got[(m.source, m.dest, m.payload, m.tag)] += 1
        assert stats.rounds <= ceil_log2(P)
        keys = [(m.source, m.tag) for m in inbox]
        assert keys == sorted(keys)
    assert sent == got
    return res


def test_route_p1_local():
    res = spawn(1, lambda c: crystal_route(c, [RoutedMessage(0, 0, b"abc", 1)]))
    inbox, stats = res[0]
    assert [m.payload for m in inbox] == [b"abc"]
    assert stats.rounds == 0


def test_route_ring_p8():
    def prog(c):
        return crystal_route(c, [RoutedMessage((c.rank + 1) % 8, c.rank, bytes([c.rank]), 0)])

    for r, (inbox, stats) in enumerate(spawn(8, prog)):
        assert len(inbox) == 1 and inbox[0].source == (r - 1) % 8
        assert stats.rounds == 3


def test_route_p6_200_random():
    _check_routing(6, 200 // 6 + 1, 11)


@given(st.integers(1, 64), st.integers(0, 6), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_route_conserves_messages(P, nmsg, seed):
    _check_routing(P, nmsg, seed)


def test_route_deterministic():
    a = spawn(6, _route_prog, 6, 30, 3, seed=1)
    b = spawn(6, _route_prog, 6, 30, 3, seed=1, scheduler="serial")
    for (_, ia, _), (_, ib, _) in zip(a, b):
        assert [(m.source, m.tag, m.payload) for m in ia] == [(m.source, m.tag, m.payload) for m in ib]


def test_route_bad_destination():
    def prog(c):
        crystal_route(c, [RoutedMessage(7, c.rank, b"", 0)] if c.rank == 1 else [])

    with pytest.raises(HarnessError) as ei:
        spawn(3, prog)
    assert isinstance(ei.value.exc, RoutingError)


def test_split_routing_stays_inside():
    def prog(c):
        sub = c.split(c.rank % 2)
        out = [RoutedMessage(d, sub.rank, pack_arrays(np.array([c.rank])), 0) for d in range(sub.size)]
        inbox, _ = crystal_route(sub, out)
        return c.rank % 2, sorted(int(unpack_arrays(m.payload)[0][0]) for m in inbox)

    for color, senders in spawn(5, prog):
        assert all(s % 2 == color for s in senders)
        assert len(senders) == (3 if color == 0 else 2)


def test_pack_roundtrip():
    a, b = np.arange(5), np.eye(2)
    x, y = unpack_arrays(pack_arrays(a, b))
    assert np.array_equal(a, x) and np.array_equal(b, y)
