"""Shared domain types, identifiers, timestamps and their comparison rules.

Identifiers are plain ints in the hot path; this module pins down their
ranges, total orders and the canonical little-endian binary encoding that
both the simulated and the socket transport share.

Conventions used across the package:

* ``NodeId``   - small non-negative int, unique per node in a deployment.
* ``EpochId``  - non-negative int, bumped on every membership update.
* ``ObjectKey``- opaque 64-bit int, unique per object.
* ``o_ts``     - ownership timestamp ``(obj_ver, node_id)`` tuple, ordered
  lexicographically (obj_ver first, node id as tiebreak).
* ``tx_id``    - ``(node_id, pipeline_id, local_tx_id)`` tuple; the
  ``(node, pipeline)`` prefix names a pipeline, ``local_tx_id`` is the
  monotone slot number within it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

NodeId = int
EpochId = int
ObjectKey = int
PipelineId = int

# Ownership timestamp: (obj_ver, node_id).
OwnTs = Tuple[int, int]
TS_ZERO: OwnTs = (0, 0)

# tx identifier: (node_id, pipeline_id, local_tx_id).
TxId = Tuple[int, int, int]

MAX_KEY = 2**64 - 1
MAX_OBJ_VER = 2**64 - 1  # overflow is a fatal error, never wrapped


def ts_less(a: OwnTs, b: OwnTs) -> bool:
    """Strict lexicographic order on ownership timestamps."""
    return a < b


def check_obj_ver(ver: int) -> int:
    if ver > MAX_OBJ_VER:
        raise OverflowError("object version counter exhausted")
    return ver


@dataclass(frozen=True)
class ReplicaSet:
    """Placement of one object: its owner plus the ordered reader list.

    ``readers`` is kept in promotion order (earliest promoted first) so
    that reader eviction can deterministically pick the longest-standing
    reader; equality and the agreement invariant compare the full tuple.
    """

    owner: Optional[NodeId]
    readers: Tuple[NodeId, ...] = ()

    def __post_init__(self) -> None:
        if self.owner is not None and self.owner in self.readers:
            raise ValueError("owner cannot also be listed as a reader")
        if len(set(self.readers)) != len(self.readers):
            raise ValueError("duplicate reader")

    def nodes(self) -> Tuple[NodeId, ...]:
        if self.owner is None:
            return self.readers
        return (self.owner,) + self.readers

    def size(self) -> int:
        return len(self.readers) + (1 if self.owner is not None else 0)

    def prune(self, live: Iterable[NodeId]) -> "ReplicaSet":
        live = set(live)
        return ReplicaSet(
            owner=self.owner if self.owner in live else None,
            readers=tuple(r for r in self.readers if r in live),
        )


# -- canonical binary encoding (little-endian, fixed width) ----------------

_KEY = struct.Struct("<Q")
_OTS = struct.Struct("<QH")
_TXID = struct.Struct("<HHI")


def pack_key(key: ObjectKey) -> bytes:
    return _KEY.pack(key)


def unpack_key(buf: bytes, off: int = 0) -> ObjectKey:
    return _KEY.unpack_from(buf, off)[0]


def pack_ts(ts: OwnTs) -> bytes:
    return _OTS.pack(ts[0], ts[1])


def unpack_ts(buf: bytes, off: int = 0) -> OwnTs:
    v, n = _OTS.unpack_from(buf, off)
    return (v, n)


def pack_txid(tx: TxId) -> bytes:
    return _TXID.pack(tx[0], tx[1], tx[2])


def unpack_txid(buf: bytes, off: int = 0) -> TxId:
    n, p, s = _TXID.unpack_from(buf, off)
    return (n, p, s)


def pack_replicas(rs: ReplicaSet) -> bytes:
    owner = 0xFFFF if rs.owner is None else rs.owner
    out = struct.pack("<HH", owner, len(rs.readers))
    for r in rs.readers:
        out += struct.pack("<H", r)
    return out


def unpack_replicas(buf: bytes, off: int = 0) -> Tuple[ReplicaSet, int]:
    owner, n = struct.unpack_from("<HH", buf, off)
    off += 4
    readers = struct.unpack_from("<%dH" % n, buf, off)
    off += 2 * n
    return ReplicaSet(None if owner == 0xFFFF else owner, tuple(readers)), off


def payload_to_bytes(value, size: int) -> bytes:
    """Materialize an object payload as ``size`` bytes.

    The simulator carries payloads as small ints (cheap, hashable); the
    wire format stores the value in the first 8 bytes and zero-pads to the
    object size so both backends produce identical bytes.
    """
    if isinstance(value, bytes):
        return value.ljust(size, b"\0")[: max(size, len(value))]
    head = struct.pack("<q", value)
    if size <= 8:
        return head
    return head + b"\0" * (size - 8)


def payload_from_bytes(buf: bytes):
    return struct.unpack_from("<q", buf, 0)[0]
