import random

import pytest

from zeus.core import (ReplicaSet, pack_key, pack_replicas, pack_ts,
                       pack_txid, payload_from_bytes, payload_to_bytes,
                       ts_less, unpack_key, unpack_replicas, unpack_ts,
                       unpack_txid)


def test_ts_less_examples():
    # lexicographic tiebreak on node id
    assert ts_less((5, 2), (5, 3)) is True
    # obj_ver dominates
    assert ts_less((6, 1), (5, 9)) is False
    # equality is not less-than
    assert ts_less((5, 2), (5, 2)) is False


def test_ts_less_is_strict_total_order():
    rng = random.Random(42)
    pts = [(rng.randrange(10), rng.randrange(8)) for _ in range(300)]
    for a in pts[:60]:
        assert not ts_less(a, a)  # irreflexive
    for _ in range(2000):
        a, b, c = rng.choice(pts), rng.choice(pts), rng.choice(pts)
        if ts_less(a, b) and ts_less(b, c):
            assert ts_less(a, c)  # transitive
        if a != b:
            assert ts_less(a, b) != ts_less(b, a)  # total on distinct


def test_replica_set_invariants():
    rs = ReplicaSet(owner=1, readers=(2, 3))
    assert rs.size() == 3
    assert rs.nodes() == (1, 2, 3)
    with pytest.raises(ValueError):
        ReplicaSet(owner=1, readers=(1, 2))
    with pytest.raises(ValueError):
        ReplicaSet(owner=0, readers=(2, 2))


def test_replica_set_prune():
    rs = ReplicaSet(owner=1, readers=(2, 3))
    p = rs.prune({2, 3})
    assert p.owner is None and p.readers == (2, 3)


def test_codec_roundtrips():
    rng = random.Random(7)
    for _ in range(200):
        key = rng.randrange(2**64)
        assert unpack_key(pack_key(key)) == key
        ts = (rng.randrange(2**40), rng.randrange(2**16))
        assert unpack_ts(pack_ts(ts)) == ts
        tx = (rng.randrange(2**16), rng.randrange(2**16),
              rng.randrange(2**32))
        assert unpack_txid(pack_txid(tx)) == tx
    rs = ReplicaSet(owner=None, readers=(4, 9, 1))
    out, _ = unpack_replicas(pack_replicas(rs))
    assert out == rs


def test_payload_encoding():
    buf = payload_to_bytes(-12345, 400)
    assert len(buf) == 400
    assert payload_from_bytes(buf) == -12345
    assert payload_to_bytes(7, 8) == payload_to_bytes(7, 8)
