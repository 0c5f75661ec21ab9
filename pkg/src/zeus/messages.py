"""Protocol message definitions and their canonical wire encoding.

Nine protocol messages cross node boundaries.  The six ownership messages
(REQ, INV, ACK, NACK, RESP, VAL) are rare and carried by one ``OwnMsg``
class; the three commit messages (R-INV, R-ACK, R-VAL) are the hot path
and are carried as plain tuples with the kind int in slot 0:

    R-INV: (K_RINV, coord, pipeline, slot, e_id, prev_val, followers, updates)
           updates = ((key, t_version, value), ...)
    R-ACK: (K_RACK, coord, pipeline, upto, e_id)      cumulative ack
    R-VAL: (K_RVAL, coord, pipeline, slot, e_id)

Both transports share the encoders below, so the bytes on the simulated
and the socket backend are identical.
"""

from __future__ import annotations

import struct
from typing import Optional, Tuple

K_BAREACK = 0
K_REQ = 1
K_INV = 2
K_ACK = 3
K_NACK = 4
K_RESP = 5
K_VAL = 6
K_RINV = 7
K_RACK = 8
K_RVAL = 9

KIND_NAMES = {
    K_REQ: "REQ", K_INV: "INV", K_ACK: "ACK", K_NACK: "NACK",
    K_RESP: "RESP", K_VAL: "VAL", K_RINV: "R-INV", K_RACK: "R-ACK",
    K_RVAL: "R-VAL",
}

# Desired access levels carried by ownership requests.
WANT_OWNER = 0          # non-replica wants ownership (ACK carries data)
WANT_OWNER_READER = 1   # reader wants ownership (no data needed)
WANT_READER = 2         # non-replica wants reader level (data needed)
WANT_DROP_READER = 3    # evict a reader, out of the critical path
WANT_CREATE = 4         # register a fresh object (malloc)
WANT_DESTROY = 5        # unregister an object (free)

_NEEDS_DATA = {WANT_OWNER: True, WANT_READER: True}


def wants_data(desired: int) -> bool:
    return _NEEDS_DATA.get(desired, False)


class OwnMsg:
    """One ownership protocol message; ``kind`` selects the variant.

    ``owner``/``readers`` carry the proposed replica placement, ``need``
    the arbiter set expected to acknowledge (so a non-replica requester
    can count ACKs), ``ack_target`` where ACKs must be sent, and ``data``
    with ``ver`` the object payload when the requester lacks it.
    """

    __slots__ = (
        "kind", "request_id", "requester", "key", "e_id", "ots",
        "owner", "readers", "need", "ack_target", "replay", "desired",
        "ver", "data", "size",
    )

    def __init__(self, kind, request_id, requester, key, e_id, ots=(0, 0),
                 owner=None, readers=(), need=(), ack_target=0, replay=False,
                 desired=WANT_OWNER, ver=0, data=None, size=0):
        self.kind = kind
        self.request_id = request_id
        self.requester = requester
        self.key = key
        self.e_id = e_id
        self.ots = ots
        self.owner = owner
        self.readers = readers
        self.need = need
        self.ack_target = ack_target
        self.replay = replay
        self.desired = desired
        self.ver = ver
        self.data = data
        self.size = size

    def __getitem__(self, i: int) -> int:
        # messages dispatch uniformly on msg[0], tuples and OwnMsg alike
        return self.kind

    def __repr__(self) -> str:  # trace/debug friendly
        return ("%s(req=%d@n%d key=%d e=%d ts=%s own=%s rd=%s)" % (
            KIND_NAMES[self.kind], self.request_id, self.requester,
            self.key, self.e_id, self.ots, self.owner, self.readers))


# -- wire encoding ----------------------------------------------------------
#
# Packet header (16 bytes, little endian):
#   kind u8 | flags u8 | length u16 | e_id u32 | seq u32 | ack u32
# flags bit0: packet carries a sequence number (bare acks do not).

HEADER = struct.Struct("<BBHIII")
HEADER_LEN = 16

_NONE16 = 0xFFFF


def _pack_value(value) -> bytes:
    if isinstance(value, bytes):
        return struct.pack("<BI", 1, len(value)) + value
    return struct.pack("<Bq", 0, value)


def _unpack_value(buf: bytes, off: int):
    tag = buf[off]
    off += 1
    if tag == 1:
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        return buf[off:off + n], off + n
    (v,) = struct.unpack_from("<q", buf, off)
    return v, off + 8


def _pack_nodes(nodes) -> bytes:
    return struct.pack("<H%dH" % len(nodes), len(nodes), *nodes)


def _unpack_nodes(buf: bytes, off: int):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    nodes = struct.unpack_from("<%dH" % n, buf, off)
    return tuple(nodes), off + 2 * n


def encode_body(msg) -> bytes:
    """Encode one protocol message (tuple or OwnMsg) to body bytes."""
    if type(msg) is tuple:
        kind = msg[0]
        if kind == K_RINV:
            _, coord, pip, slot, e_id, prev, followers, updates = msg
            out = [struct.pack("<HHIB", coord, pip, slot, prev),
                   _pack_nodes(followers),
                   struct.pack("<H", len(updates))]
            for key, ver, val in updates:
                out.append(struct.pack("<QQ", key, ver))
                out.append(_pack_value(val))
            return b"".join(out)
        # R-ACK and R-VAL share the (coord, pip, n) shape
        _, coord, pip, n, e_id = msg
        return struct.pack("<HHI", coord, pip, n)
    m: OwnMsg = msg
    out = [struct.pack(
        "<IHQQHHHBBQ",
        m.request_id, m.requester, m.key, m.ots[0], m.ots[1],
        _NONE16 if m.owner is None else m.owner, m.ack_target,
        (1 if m.replay else 0), m.desired, m.ver,
    ), _pack_nodes(m.readers), _pack_nodes(m.need),
        struct.pack("<I", m.size)]
    if m.data is None:
        out.append(b"\xff")
    else:
        out.append(b"\x01")
        out.append(_pack_value(m.data))
    return b"".join(out)


def decode_body(kind: int, e_id: int, buf: bytes):
    if kind == K_RINV:
        coord, pip, slot, prev = struct.unpack_from("<HHIB", buf, 0)
        followers, off = _unpack_nodes(buf, 9)
        (nu,) = struct.unpack_from("<H", buf, off)
        off += 2
        updates = []
        for _ in range(nu):
            key, ver = struct.unpack_from("<QQ", buf, off)
            off += 16
            val, off = _unpack_value(buf, off)
            updates.append((key, ver, val))
        return (K_RINV, coord, pip, slot, e_id, prev, followers,
                tuple(updates))
    if kind in (K_RACK, K_RVAL):
        coord, pip, n = struct.unpack_from("<HHI", buf, 0)
        return (kind, coord, pip, n, e_id)
    (request_id, requester, key, tsv, tsn, owner, ack_target, replay,
     desired, ver) = struct.unpack_from("<IHQQHHHBBQ", buf, 0)
    off = struct.calcsize("<IHQQHHHBBQ")
    readers, off = _unpack_nodes(buf, off)
    need, off = _unpack_nodes(buf, off)
    (size,) = struct.unpack_from("<I", buf, off)
    off += 4
    data = None
    if buf[off] == 1:
        data, _ = _unpack_value(buf, off + 1)
    return OwnMsg(kind, request_id, requester, key, e_id, (tsv, tsn),
                  None if owner == _NONE16 else owner, readers, need,
                  ack_target, bool(replay), desired, ver, data, size)


def msg_kind(msg) -> int:
    return msg[0] if type(msg) is tuple else msg.kind


def msg_epoch(msg) -> int:
    return msg[4] if type(msg) is tuple else msg.e_id


def encode_packet(seq: Optional[int], ack: int, msg) -> bytes:
    """Frame one packet: 16-byte header plus canonical body."""
    if msg is None:
        return HEADER.pack(K_BAREACK, 0, 0, 0, 0, ack & 0xFFFFFFFF)
    body = encode_body(msg)
    flags = 1 if seq is not None else 0
    return HEADER.pack(msg_kind(msg), flags, len(body), msg_epoch(msg),
                       seq if seq is not None else 0,
                       ack & 0xFFFFFFFF) + body


def decode_packet(buf: bytes) -> Tuple[Optional[int], int, object]:
    kind, flags, length, e_id, seq, ack = HEADER.unpack_from(buf, 0)
    ack = ack if ack != 0xFFFFFFFF else -1
    if kind == K_BAREACK:
        return None, ack, None
    body = buf[HEADER_LEN:HEADER_LEN + length]
    msg = decode_body(kind, e_id, body)
    return (seq if flags & 1 else None), ack, msg
