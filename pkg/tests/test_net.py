import random

from zeus.messages import (K_ACK, K_RACK, K_RINV, K_RVAL, OwnMsg,
                           decode_packet, encode_packet)
from zeus.net import EventLoop, FaultSchedule, ReliableEndpoint, SimNet


def make_pair(fault=None, n=2):
    loop = EventLoop()
    net = SimNet(loop, n, fault or FaultSchedule())
    boxes = [[] for _ in range(n)]
    eps = []
    for i in range(n):
        ep = ReliableEndpoint(i, net, loop,
                              lambda src, msg, _b=boxes[i]:
                              _b.append((src, msg)))
        net.attach(i, ep)
        eps.append(ep)
    return loop, net, eps, boxes


def test_exactly_once_in_order_under_chaos():
    fault = FaultSchedule(seed=3, drop=0.2, dup=0.2, reorder=5)
    loop, net, eps, boxes = make_pair(fault)
    msgs = [(K_RVAL, 0, 0, i, 0) for i in range(200)]
    for m in msgs:
        eps[0].send(1, m)
    loop.run()
    assert [m for _s, m in boxes[1]] == msgs


def test_total_loss_window_recovers():
    # drop probability 1.0 on the link until t=40, then clean
    fault = FaultSchedule(seed=1, link_windows=((0, 1, 0, 40, 1.0, 0.0),))
    loop, net, eps, boxes = make_pair(fault)
    eps[0].send(1, (K_RVAL, 0, 0, 7, 0))
    loop.run(until=39)
    assert boxes[1] == []
    loop.run()
    assert [m for _s, m in boxes[1]] == [(K_RVAL, 0, 0, 7, 0)]


def test_duplicates_are_suppressed():
    fault = FaultSchedule(seed=2, dup=1.0)
    loop, net, eps, boxes = make_pair(fault)
    for i in range(20):
        eps[0].send(1, (K_RVAL, 0, 0, i, 0))
    loop.run()
    assert [m[3] for _s, m in boxes[1]] == list(range(20))


def test_determinism_same_seed_same_execution():
    def run(seed):
        fault = FaultSchedule(seed=seed, drop=0.1, dup=0.1, reorder=4)
        loop, net, eps, boxes = make_pair(fault)
        rng = random.Random(99)
        for i in range(150):
            src = rng.randrange(2)
            eps[src].send(1 - src, (K_RVAL, src, 0, i, 0))
        loop.run()
        deliveries = [(b, s, m) for b in (0, 1) for s, m in boxes[b]]
        return deliveries, net.packets_sent, loop.now

    assert run(5) == run(5)
    # delivered sequences match regardless of faults (that is the
    # reliable layer's contract); the raw executions differ
    d5, p5, t5 = run(5)
    d6, p6, t6 = run(6)
    assert d5 == d6
    assert (p5, t5) != (p6, t6)


def test_dead_peer_traffic_stops():
    loop, net, eps, boxes = make_pair()
    eps[0].send(1, (K_RVAL, 0, 0, 1, 0))
    loop.run()
    eps[0].forget_peer(1)
    eps[0].send(1, (K_RVAL, 0, 0, 2, 0))
    loop.run()
    assert len(boxes[1]) == 1
    assert loop.pending() == 0


def test_wire_roundtrip_tuples():
    rinv = (K_RINV, 3, 1, 42, 7, 1, (1, 2), ((9, 5, 123), (8, 6, -1)))
    buf = encode_packet(10, 4, rinv)
    seq, ack, out = decode_packet(buf)
    assert (seq, ack) == (10, 4)
    assert out == rinv
    rack = (K_RACK, 3, 1, 41, 7)
    assert decode_packet(encode_packet(0, -1, rack))[2] == rack


def test_wire_roundtrip_ownmsg():
    m = OwnMsg(K_ACK, 17, 4, 99, 2, (6, 1), owner=4, readers=(1, 2),
               need=(0, 1, 2, 3), ack_target=4, replay=True, desired=0,
               ver=12, data=777, size=400)
    seq, ack, out = decode_packet(encode_packet(5, 3, m))
    for f in ("kind", "request_id", "requester", "key", "e_id", "ots",
              "owner", "readers", "need", "ack_target", "replay",
              "desired", "ver", "data", "size"):
        assert getattr(out, f) == getattr(m, f), f


def test_bare_ack_frame():
    buf = encode_packet(None, 41, None)
    assert len(buf) == 16
    seq, ack, msg = decode_packet(buf)
    assert seq is None and ack == 41 and msg is None
