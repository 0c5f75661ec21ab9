"""Reliable ownership: atomically moves object access levels and content.

One request flows REQ -> INV -> ACK (-> NACK) -> VAL between the
requester, a driver (an arbitrarily chosen directory node) and the
arbiters (all directory nodes plus the current owner, plus any reader
that must install, supply or drop data for this particular request).

Arbiters *stage* the proposed metadata when they acknowledge an INV and
apply it only on VAL; the requester applies first, as soon as it holds an
ACK from every live arbiter, which is also the moment the application
unblocks (1.5 round-trips).  Contention is resolved by the ownership
timestamp: a driver ignores a contending INV unless it carries a larger
o_ts, so exactly one contender can ever assemble a full ACK set.

After an epoch change, a blocked arbiter whose requester died replays the
stored INV verbatim (arb-replay), collects the ACKs itself and finishes
with RESP (live requester applies first) or direct VALs (dead requester).
A live requester re-sends its REQ instead; both paths are idempotent.
"""

from __future__ import annotations

import random
from typing import Callable, Dict, List, Optional, Set, Tuple

from .core import ReplicaSet, ts_less
from .messages import (
    K_ACK, K_INV, K_NACK, K_REQ, K_RESP, K_VAL, OwnMsg, WANT_CREATE,
    WANT_DESTROY, WANT_DROP_READER, WANT_OWNER, WANT_OWNER_READER,
    WANT_READER, wants_data,
)

O_VALID = 0
O_INVALID = 1
O_REQUEST = 2
O_DRIVE = 3

STATE_NAMES = {O_VALID: "Valid", O_INVALID: "Invalid",
               O_REQUEST: "Request", O_DRIVE: "Drive"}

# NACK reasons
NR_BUSY = 1          # object involved in a pending transaction
NR_LOST = 2          # lost the o_ts arbitration
NR_GONE = 3          # key destroyed or unknown
NR_NOREADER = 4      # nothing to evict

BACKOFF_BASE = 2
BACKOFF_CAP = 64
MAX_ATTEMPTS = 10


class OwnRec:
    """Per-key ownership metadata as held by a directory node or owner.

    ``ots``/``owner``/``readers`` are the *applied* values; a pending
    request sits in ``pend`` until the VAL arrives.  ``queue`` holds REQ
    messages a driver cannot serve yet.
    """

    __slots__ = ("ots", "owner", "readers", "state", "pend", "queue",
                 "tombstone")

    def __init__(self, ots=(0, 0), owner=None, readers=()):
        self.ots = ots
        self.owner = owner
        self.readers = readers
        self.state = O_VALID
        self.pend: Optional[Pending] = None
        self.queue: List[OwnMsg] = []
        self.tombstone = False

    def effective_ts(self):
        return self.pend.ots if self.pend is not None else self.ots


class Pending:
    """A staged request at one arbiter (the driver keeps the same form)."""

    __slots__ = ("request_id", "requester", "ots", "owner", "readers",
                 "need", "ack_target", "desired", "driver", "got",
                 "collecting", "data", "ver", "size")

    def __init__(self, request_id, requester, ots, owner, readers, need,
                 ack_target, desired, driver, data=None, ver=0, size=0):
        self.request_id = request_id
        self.requester = requester
        self.ots = ots
        self.owner = owner
        self.readers = readers
        self.need = need
        self.ack_target = ack_target
        self.desired = desired
        self.driver = driver
        self.got: Set[int] = set()
        self.collecting = False     # true while this node runs an arb-replay
        self.data = data
        self.ver = ver
        self.size = size

    def same_request(self, msg: OwnMsg) -> bool:
        return (self.requester == msg.requester
                and self.request_id == msg.request_id)


class OutReq:
    """Requester-side record of one outstanding ownership request."""

    __slots__ = ("key", "request_id", "desired", "driver", "waiters",
                 "need", "got", "ots", "owner", "readers", "data", "ver",
                 "attempt", "t_start", "surfaced", "data_payload", "size",
                 "placement")

    def __init__(self, key, request_id, desired, driver, t_start,
                 data_payload=None, size=0, placement=()):
        self.key = key
        self.request_id = request_id
        self.desired = desired
        self.driver = driver
        self.waiters: List[Callable] = []
        self.need: Tuple[int, ...] = ()
        self.got: Set[int] = set()
        self.ots = None
        self.owner = None
        self.readers = ()
        self.data = None
        self.ver = 0
        self.attempt = 1
        self.t_start = t_start
        self.surfaced = False
        self.data_payload = data_payload
        self.size = size
        self.placement = placement


class OwnershipEngine:
    def __init__(self, node) -> None:
        self.node = node
        self.recs: Dict[int, OwnRec] = {}
        self.outst: Dict[int, OutReq] = {}
        self.next_rid = 1
        self.deferred_replays: Dict[int, OwnMsg] = {}
        self.held_reqs: List[OwnMsg] = []
        self.recovery_hold = False
        self.dead_owner_keys: Set[int] = set()
        # mutation knob used by the model-checking self tests only
        self.mutate_val_before_apply = False
        self.stats_latency: List[int] = []
        self.stats_requests = 0
        self.stats_nacks = 0

    # -- helpers -------------------------------------------------------------

    def rec_of(self, key: int) -> OwnRec:
        rec = self.recs.get(key)
        if rec is None:
            rec = self.recs[key] = OwnRec()
        return rec

    def _is_directory(self) -> bool:
        return self.node.node_id in self.node.directory

    def _trace_state(self, key, old, new, ots, via) -> None:
        tr = self.node.trace
        if tr is not None:
            tr(("own", self.node.node_id, key, STATE_NAMES[old],
                STATE_NAMES[new], ots, via))

    # -- requester side ------------------------------------------------------

    def level_held(self, key: int, desired: int) -> bool:
        lvl = self.node.store.level.get(key)
        if desired in (WANT_OWNER, WANT_OWNER_READER):
            return lvl == 2
        if desired == WANT_READER:
            return lvl is not None
        return False

    def begin(self, key: int, desired: int, done: Optional[Callable] = None,
              payload=None, size: int = 0,
              placement: Tuple[int, ...] = ()) -> None:
        """Start (or join) an ownership request for ``key``.

        ``done(ok, reason)`` fires when the request completes, fails its
        retry budget, or targets a destroyed key.  Requests that already
        hold the desired level complete immediately with no messages.
        """
        node = self.node
        out = self.outst.get(key)
        if out is not None:
            if done is not None:
                out.waiters.append(done)
            return
        if self.level_held(key, desired):
            if done is not None:
                done(True, 0)
            return
        rid = self.next_rid
        self.next_rid += 1
        self.stats_requests += 1
        if self._is_directory():
            driver = node.node_id
        else:
            dirs = [d for d in node.directory if d in node.live]
            driver = dirs[node.rng.randrange(len(dirs))] if dirs else None
        out = OutReq(key, rid, desired, driver, node.now(), payload, size,
                     placement)
        if desired == WANT_CREATE:
            out.data = payload
            out.ver = 0
        if done is not None:
            out.waiters.append(done)
        self.outst[key] = out
        self._trace_state(key, O_VALID, O_REQUEST, None, "begin")
        if driver is None:
            self._finish(out, False, NR_GONE)
            return
        self._send_req(out)

    def _send_req(self, out: OutReq) -> None:
        node = self.node
        msg = OwnMsg(K_REQ, out.request_id, node.node_id, out.key,
                     node.e_id, desired=out.desired, data=out.data_payload,
                     size=out.size, readers=out.placement)
        if out.driver == node.node_id:
            self.on_req(node.node_id, msg)
        else:
            node.send(out.driver, msg)

    def _retry_later(self, key: int, rid: int) -> None:
        out = self.outst.get(key)
        if out is None or out.request_id != rid:
            return
        out.attempt += 1
        out.got.clear()
        out.ots = None
        if out.driver not in self.node.live:
            dirs = [d for d in self.node.directory if d in self.node.live]
            if not dirs:
                self._finish(out, False, NR_GONE)
                return
            out.driver = dirs[self.node.rng.randrange(len(dirs))]
        self._send_req(out)

    def _schedule_retry(self, out: OutReq) -> None:
        self.stats_nacks += 1
        if out.attempt >= MAX_ATTEMPTS:
            # surface the abort (every time, so re-attached transactions
            # release their local holds and deadlock cycles break) but
            # keep retrying in the background: arbiters staged on this
            # request must not stay blocked forever
            out.surfaced = True
            waiters, out.waiters = out.waiters, []
            for cb in waiters:
                cb(False, NR_BUSY)
        delay = min(BACKOFF_BASE ** min(out.attempt, 6), BACKOFF_CAP)
        self.node.loop.after(delay, self._retry_tick, (out.key,
                                                       out.request_id))

    def _retry_tick(self, arg) -> None:
        self._retry_later(*arg)

    def _finish(self, out: OutReq, ok: bool, reason: int) -> None:
        self.outst.pop(out.key, None)
        if ok:
            self.stats_latency.append(self.node.now() - out.t_start)
        waiters = out.waiters
        out.waiters = []
        for cb in waiters:
            cb(ok, reason)

    def on_nack(self, src: int, msg: OwnMsg) -> None:
        node = self.node
        if msg.e_id != node.e_id:
            return
        out = self.outst.get(msg.key)
        if out is None or out.request_id != msg.request_id:
            return
        if msg.desired in (NR_GONE, NR_NOREADER):
            # destroyed key, or an eviction that became moot: final
            self._finish(out, False, msg.desired)
            return
        self._schedule_retry(out)

    def on_ack(self, src: int, msg: OwnMsg) -> None:
        node = self.node
        if msg.e_id != node.e_id:
            return
        rec = self.recs.get(msg.key)
        if rec is not None and rec.pend is not None \
                and rec.pend.collecting and rec.pend.same_request(msg):
            self._replay_ack(rec, src, msg)
            return
        out = self.outst.get(msg.key)
        if out is None or out.request_id != msg.request_id:
            return
        if out.ots is not None and out.ots != msg.ots:
            # a newer attempt superseded this one
            if ts_less(msg.ots, out.ots):
                return
            out.got.clear()
        out.ots = msg.ots
        out.owner = msg.owner
        out.readers = msg.readers
        out.need = msg.need
        out.desired = msg.desired  # the driver may have normalized it
        if msg.data is not None and (out.data is None
                                     or msg.ver > out.ver):
            # several arbiters may offer the value (a demoting ex-owner
            # races the current one): the freshest version wins
            out.data = msg.data
            out.ver = msg.ver
        out.got.add(src)
        self._try_complete(out)

    def _try_complete(self, out: OutReq) -> None:
        if out.ots is None:
            return
        live = self.node.live
        if any(n in live and n not in out.got for n in out.need):
            return
        if out.data is None and out.owner == self.node.node_id \
                and out.desired in (WANT_OWNER, WANT_OWNER_READER) \
                and out.key not in self.node.store.ver:
            # raced: nobody could attach the value (placement moved
            # while the request was in flight); retry against the
            # settled state rather than minting over a hole
            self._schedule_retry(out)
            return
        self._apply_and_validate(out.key, out.request_id, out.ots,
                                 out.owner, out.readers, out.need,
                                 out.desired, out.data, out.ver)

    def _apply_and_validate(self, key, rid, ots, owner, readers, need,
                            desired, data, ver) -> None:
        """Requester-side completion: apply locally, then VAL the arbiters.

        Applying before any arbiter is what keeps o_replicas consistent
        with who actually has the data and the access level.
        """
        node = self.node
        out = self.outst.get(key)
        val = OwnMsg(K_VAL, rid, node.node_id, key, node.e_id, ots,
                     owner, readers, need, desired=desired)
        if self.mutate_val_before_apply:
            # protocol mutant (checker self-test): validate the arbiters
            # without having applied locally first
            for arb in need:
                if arb != node.node_id:
                    node.send(arb, val)
            node.loop.after(0, self._mutant_apply,
                            (key, rid, ots, owner, readers, need, desired,
                             data, ver))
            return
        self._apply_local(key, ots, owner, readers, desired, data, ver)
        self._settle_after_apply(key, rid)
        for arb in need:
            if arb != node.node_id:
                node.send(arb, val)
        if out is not None and out.request_id == rid:
            self._finish(out, True, 0)
        self._post_apply(key, desired, owner, readers)

    def _settle_after_apply(self, key: int, rid: int) -> None:
        """Requester-side bookkeeping after applying its own request:
        clear a self-driven stage, but leave a stage of an unrelated
        request (and our Invalid o_state) untouched."""
        node = self.node
        rec = self.recs.get(key)
        if rec is None:
            return
        if rec.pend is not None and rec.pend.request_id == rid \
                and rec.pend.requester == node.node_id:
            rec.pend = None
        if rec.pend is None:
            rec.state = O_VALID
            self._drain_queue(key, rec)
        else:
            # still staged for another request: not Valid
            node.verifier.own_invalidate(node.node_id, key)

    def _mutant_apply(self, arg) -> None:
        key, rid, ots, owner, readers, need, desired, data, ver = arg
        node = self.node
        self._apply_local(key, ots, owner, readers, desired, data, ver)
        self._settle_after_apply(key, rid)
        out = self.outst.get(key)
        if out is not None and out.request_id == rid:
            self._finish(out, True, 0)
        self._post_apply(key, desired, owner, readers)

    def _post_apply(self, key, desired, owner, readers) -> None:
        node = self.node
        if desired in (WANT_OWNER, WANT_OWNER_READER) \
                and owner == node.node_id:
            if 1 + len(readers) > node.degree:
                node.loop.after(1, self._evict_tick, key)

    def _evict_tick(self, key) -> None:
        node = self.node
        rec = self.recs.get(key)
        if rec is None or rec.owner != node.node_id:
            return
        if 1 + len([r for r in rec.readers if r in node.live]) > node.degree:
            self.begin(key, WANT_DROP_READER)

    def _apply_local(self, key, ots, owner, readers, desired, data, ver):
        node = self.node
        store = node.store
        me = node.node_id
        if desired == WANT_DESTROY:
            store.drop(key)
            rec = self.rec_of(key)
            rec.ots = ots
            rec.owner = None
            rec.readers = ()
            rec.tombstone = True
            rec.state = O_VALID
            node.verifier.own_apply(me, key, ots, None, ())
            return
        if owner == me:
            if data is not None:
                store.install(key, ver, data, me, node.verifier)
            store.level[key] = 2
            rec = self.rec_of(key)
            rec.ots = ots
            rec.owner = owner
            rec.readers = readers
            rec.state = O_VALID
        elif me in readers:
            if data is not None:
                store.install(key, ver, data, me, node.verifier)
            store.level[key] = 1
            if not self._is_directory():
                self.recs.pop(key, None)
            else:
                rec = self.rec_of(key)
                rec.ots = ots
                rec.owner = owner
                rec.readers = readers
                rec.state = O_VALID
        else:
            # demoted or evicted: no replica left on this node
            if store.level.get(key) is not None:
                store.drop(key)
            if self._is_directory():
                rec = self.rec_of(key)
                rec.ots = ots
                rec.owner = owner
                rec.readers = readers
                rec.state = O_VALID
            else:
                self.recs.pop(key, None)
        node.verifier.own_apply(me, key, ots, owner, readers)
        self._trace_state(key, O_REQUEST, O_VALID, ots, "apply")

    # -- driver side ---------------------------------------------------------

    def on_req(self, src: int, msg: OwnMsg) -> None:
        node = self.node
        if msg.e_id != node.e_id:
            return  # requests from previous epochs are ignored
        rec = self.rec_of(msg.key)
        if rec.tombstone:
            self._nack(msg.requester, msg, NR_GONE)
            return
        if rec.pend is not None:
            if rec.pend.same_request(msg):
                self._redrive(msg.key, rec)
            elif not any(q.requester == msg.requester
                         and q.request_id == msg.request_id
                         for q in rec.queue):
                rec.queue.append(msg)
            return
        if self.recovery_hold and rec.owner is not None \
                and rec.owner not in node.live:
            self.held_reqs.append(msg)
            return
        self._drive(rec, msg)

    def _proposal(self, rec: OwnRec, msg: OwnMsg):
        """Compute the proposed replica set, arbiter set and effective
        access-level request (the requester's replica status may have
        changed while the request waited: the driver's applied view
        decides whether the object's value must travel)."""
        node = self.node
        live = node.live
        requester = msg.requester
        desired = msg.desired
        readers = [r for r in rec.readers if r in live]
        owner = rec.owner if rec.owner in live else None
        if desired in (WANT_OWNER, WANT_OWNER_READER):
            desired = WANT_OWNER_READER if requester in readers \
                else WANT_OWNER
        if desired in (WANT_OWNER, WANT_OWNER_READER):
            new_readers = [r for r in readers if r != requester]
            if owner is not None and owner != requester:
                new_readers.append(owner)
            new_owner = requester
        elif desired == WANT_READER:
            new_owner = owner
            new_readers = readers if requester in readers \
                else readers + [requester]
        elif desired == WANT_DROP_READER:
            victims = [r for r in readers if r != requester]
            # the eviction may have waited in a queue; re-check that the
            # replica count still exceeds the configured degree
            if not victims or owner is None \
                    or 1 + len(readers) <= node.degree:
                return None
            new_owner = owner
            new_readers = [r for r in readers if r != victims[0]]
        elif desired == WANT_CREATE:
            new_owner = requester
            new_readers = [r for r in msg.readers if r in live]
        else:  # WANT_DESTROY
            new_owner = None
            new_readers = []
        need = set(d for d in node.directory if d in live)
        if owner is not None:
            need.add(owner)
        if wants_data(desired) and owner is None:
            src_readers = [r for r in readers if r != requester]
            if src_readers:
                need.add(min(src_readers))
        if desired == WANT_DROP_READER:
            need.update(set(readers) - set(new_readers))
        if desired in (WANT_CREATE, WANT_DESTROY):
            need.update(new_readers if desired == WANT_CREATE else readers)
        need.discard(requester)
        return new_owner, tuple(new_readers), tuple(sorted(need)), desired

    def _drive(self, rec: OwnRec, msg: OwnMsg) -> None:
        node = self.node
        # a driver that is also the current owner arbitrates like any
        # owner: no transfer while the object has a pending transaction
        if rec.owner == node.node_id and msg.desired != WANT_DROP_READER \
                and node.busy_for_transfer(msg.key):
            self._nack(msg.requester, msg, NR_BUSY)
            return
        prop = self._proposal(rec, msg)
        if prop is None:
            self._nack(msg.requester, msg, NR_NOREADER)
            return
        new_owner, new_readers, need, desired = prop
        ots = (rec.ots[0] + 1, node.node_id)
        pend = Pending(msg.request_id, msg.requester, ots, new_owner,
                       new_readers, need, msg.requester, desired,
                       node.node_id, data=msg.data, ver=0, size=msg.size)
        rec.pend = pend
        old = rec.state
        rec.state = O_DRIVE
        self._trace_state(msg.key, old, O_DRIVE, ots, "drive")
        self._broadcast_inv(msg.key, rec, pend, replay=False)
        # the driver is itself an arbiter and acknowledges right away
        self._stage_and_ack(msg.key, rec, self._inv_msg(msg.key, pend,
                                                        False), local=True)

    def _redrive(self, key: int, rec: OwnRec) -> None:
        pend = rec.pend
        if pend.desired in (WANT_OWNER, WANT_OWNER_READER):
            # the requester's replica status may have shifted since the
            # original drive; whether data must travel follows the
            # driver's current applied view
            pend.desired = WANT_OWNER_READER \
                if pend.requester in rec.readers else WANT_OWNER
        self._broadcast_inv(key, rec, pend, replay=False)
        self._ack(key, rec, pend)

    def _inv_msg(self, key: int, pend: Pending, replay: bool,
                 target_self: bool = False) -> OwnMsg:
        node = self.node
        return OwnMsg(K_INV, pend.request_id, pend.requester, key,
                      node.e_id, pend.ots, pend.owner, pend.readers,
                      pend.need,
                      ack_target=(node.node_id if replay
                                  else pend.requester),
                      replay=replay, desired=pend.desired, data=pend.data,
                      size=pend.size)

    def _broadcast_inv(self, key: int, rec: OwnRec, pend: Pending,
                       replay: bool) -> None:
        node = self.node
        msg = self._inv_msg(key, pend, replay)
        for arb in pend.need:
            if arb != node.node_id:
                node.send(arb, msg)

    # -- arbiter side --------------------------------------------------------

    def on_inv(self, src: int, msg: OwnMsg) -> None:
        node = self.node
        if msg.e_id != node.e_id:
            return
        rec = self.rec_of(msg.key)
        if msg.ots == rec.ots:
            # already applied (arb-replay after VAL): plain ACK
            self._ack_applied(msg.key, rec, msg)
            return
        if ts_less(msg.ots, rec.ots):
            return  # reordered leftover of a superseded request
        if rec.pend is not None:
            pend = rec.pend
            if pend.same_request(msg):
                if ts_less(pend.ots, msg.ots):
                    # same request re-minted (new driver or a fresher
                    # base): replace the stage wholesale
                    self._stage_and_ack(msg.key, rec, msg)
                else:
                    if pend.ots == msg.ots:
                        pend.ack_target = msg.ack_target
                        pend.desired = msg.desired
                    self._ack(msg.key, rec, pend)
                return
            if not ts_less(pend.ots, msg.ots):
                return  # our staged request wins this arbitration
            if rec.state == O_DRIVE:
                # our drive lost: tell our requester before adopting
                self._nack(pend.requester, self._inv_msg(msg.key, pend,
                                                         False), NR_LOST)
        if self._owner_busy(msg.key, rec, msg):
            if msg.replay:
                self.deferred_replays[msg.key] = msg
            else:
                self._nack(msg.requester, msg, NR_BUSY)
            return
        self._stage_and_ack(msg.key, rec, msg)

    def _owner_busy(self, key: int, rec: OwnRec, msg: OwnMsg) -> bool:
        node = self.node
        if rec.owner != node.node_id:
            return False
        if msg.desired in (WANT_DROP_READER,):
            return False
        return node.busy_for_transfer(key)

    def _stage_and_ack(self, key: int, rec: OwnRec, msg: OwnMsg,
                       local: bool = False) -> None:
        node = self.node
        if not local:
            pend = Pending(msg.request_id, msg.requester, msg.ots,
                           msg.owner, msg.readers, msg.need,
                           msg.ack_target, msg.desired, src_driver(msg),
                           data=msg.data, ver=0, size=msg.size)
            rec.pend = pend
            old = rec.state
            rec.state = O_INVALID
            self._trace_state(key, old, O_INVALID, msg.ots, "stage")
        else:
            pend = rec.pend
        node.verifier.own_invalidate(node.node_id, key)
        # a reader being evicted or destroyed stops serving reads now
        if node.store.level.get(key) is not None \
                and node.node_id not in pend.readers \
                and pend.owner != node.node_id:
            node.store.condemn(key)
        self._ack(key, rec, pend)

    def _ack(self, key: int, rec: OwnRec, pend: Pending) -> None:
        node = self.node
        me = node.node_id
        data = None
        ver = 0
        if wants_data(pend.desired) and self._data_source(rec, pend) == me:
            data = node.store.val.get(key)
            ver = node.store.ver.get(key, 0)
        msg = OwnMsg(K_ACK, pend.request_id, pend.requester, key, node.e_id,
                     pend.ots, pend.owner, pend.readers, pend.need,
                     desired=pend.desired, ver=ver, data=data,
                     size=pend.size)
        if pend.ack_target == me:
            self.on_ack(me, msg)
        else:
            node.send(pend.ack_target, msg)

    def _ack_applied(self, key: int, rec: OwnRec, msg: OwnMsg) -> None:
        node = self.node
        out = OwnMsg(K_ACK, msg.request_id, msg.requester, key, node.e_id,
                     msg.ots, rec.owner, rec.readers, msg.need,
                     desired=msg.desired)
        if msg.ack_target == node.node_id:
            self.on_ack(node.node_id, out)
        else:
            node.send(msg.ack_target, out)

    def _data_source(self, rec: OwnRec, pend: Pending) -> Optional[int]:
        live = self.node.live
        if rec.owner is not None and rec.owner in live:
            return rec.owner
        readers = [r for r in rec.readers
                   if r in live and r != pend.requester]
        return min(readers) if readers else None

    def _nack(self, to: int, msg: OwnMsg, reason: int) -> None:
        node = self.node
        out = OwnMsg(K_NACK, msg.request_id, msg.requester, msg.key,
                     node.e_id, msg.ots, desired=reason)
        if to == node.node_id:
            self.on_nack(node.node_id, out)
        else:
            node.send(to, out)

    def on_val(self, src: int, msg: OwnMsg) -> None:
        # a VAL finalizes an arbitration that did complete: unlike the
        # arbitration-phase messages it stays valid across epochs
        rec = self.recs.get(msg.key)
        if rec is None or rec.pend is None:
            return  # duplicate VAL after apply
        if not rec.pend.same_request(msg):
            return  # an older request's VAL: a newer one superseded it
        rec.pend = None
        self._apply_arbiter(msg.key, rec, msg)
        self._drain_queue(msg.key, rec)

    def _apply_arbiter(self, key: int, rec: OwnRec, msg: OwnMsg) -> None:
        node = self.node
        me = node.node_id
        store = node.store
        old = rec.state
        rec.state = O_VALID
        if msg.desired == WANT_DESTROY:
            store.drop(key)
            rec.ots = msg.ots
            rec.owner = None
            rec.readers = ()
            rec.tombstone = True
            node.verifier.own_apply(me, key, msg.ots, None, ())
            self._trace_state(key, old, O_VALID, msg.ots, "val")
            return
        was_replica = store.level.get(key)
        rec.ots = msg.ots
        rec.owner = msg.owner
        # the proposal may predate a membership change
        rec.readers = tuple(r for r in msg.readers if r in node.live)
        if me == msg.owner:
            store.level[key] = 2
        elif me in msg.readers:
            if msg.desired == WANT_CREATE and was_replica is None:
                store.install(key, 0, msg.data, me, node.verifier)
            store.level[key] = 1
        elif was_replica is not None:
            store.drop(key)
        node.verifier.own_apply(me, key, msg.ots, msg.owner, rec.readers)
        self._trace_state(key, old, O_VALID, msg.ots, "val")
        if not self._is_directory() and me != msg.owner:
            self.recs.pop(key, None)

    def _drain_queue(self, key: int, rec: OwnRec) -> None:
        while rec.queue and rec.pend is None:
            msg = rec.queue.pop(0)
            if msg.e_id != self.node.e_id:
                continue
            self.on_req(msg.requester, msg)

    # -- arb-replay and epoch handling ---------------------------------------

    def on_resp(self, src: int, msg: OwnMsg) -> None:
        # a RESP confirms a completed arbitration; stable across epochs
        node = self.node
        out = self.outst.get(msg.key)
        if out is not None and out.request_id == msg.request_id:
            self._apply_and_validate(msg.key, msg.request_id, msg.ots,
                                     msg.owner, msg.readers, msg.need,
                                     msg.desired, out.data if out.data
                                     is not None else msg.data,
                                     out.ver or msg.ver)
            return
        rec = self.recs.get(msg.key)
        if rec is not None and rec.ots == msg.ots:
            # already applied: help stragglers revalidate
            val = OwnMsg(K_VAL, msg.request_id, msg.requester, msg.key,
                         node.e_id, msg.ots, msg.owner, msg.readers,
                         msg.need, desired=msg.desired)
            for arb in msg.need:
                if arb != node.node_id:
                    node.send(arb, val)

    def _replay_ack(self, rec: OwnRec, src: int, msg: OwnMsg) -> None:
        pend = rec.pend
        if msg.ots != pend.ots:
            return
        if msg.data is not None:
            pend.data = msg.data
            pend.ver = msg.ver
        pend.got.add(src)
        self._replay_try_finish(msg.key, rec)

    def _replay_try_finish(self, key: int, rec: OwnRec) -> None:
        node = self.node
        pend = rec.pend
        live = node.live
        if any(n in live and n != node.node_id and n not in pend.got
               for n in pend.need):
            return
        pend.collecting = False
        if pend.requester in live:
            resp = OwnMsg(K_RESP, pend.request_id, pend.requester, key,
                          node.e_id, pend.ots, pend.owner, pend.readers,
                          pend.need, desired=pend.desired, data=pend.data,
                          ver=pend.ver)
            node.send(pend.requester, resp)
            return
        # dead requester: validate the live arbiters directly
        val = OwnMsg(K_VAL, pend.request_id, pend.requester, key, node.e_id,
                     pend.ots, pend.owner, pend.readers, pend.need,
                     desired=pend.desired)
        for arb in pend.need:
            if arb != node.node_id and arb in live:
                node.send(arb, val)
        rec.pend = None
        self._apply_arbiter(key, rec, val)
        self._drain_queue(key, rec)

    def arb_replay(self, key: int) -> None:
        """Re-drive a staged request verbatim after a membership change."""
        node = self.node
        rec = self.recs.get(key)
        if rec is None or rec.pend is None:
            return
        pend = rec.pend
        pend.collecting = True
        pend.got = set()
        pend.ack_target = node.node_id
        msg = self._inv_msg(key, pend, replay=True)
        for arb in pend.need:
            if arb != node.node_id and arb in node.live:
                node.send(arb, msg)
        # count ourselves: the stored pending request is our own ACK
        self._replay_try_finish(key, rec)

    def on_view(self, live: Set[int], dead: Set[int]) -> None:
        node = self.node
        self.recovery_hold = True
        for key, rec in self.recs.items():
            if rec.readers and any(r in dead for r in rec.readers):
                rec.readers = tuple(r for r in rec.readers if r not in dead)
                if rec.state == O_VALID and not rec.tombstone:
                    node.verifier.own_prune(node.node_id, key, rec.ots,
                                            rec.owner, rec.readers, dead)
            if rec.pend is not None:
                rec.pend.need = tuple(n for n in rec.pend.need
                                      if n in live)
                rec.pend.readers = tuple(r for r in rec.pend.readers
                                         if r in live)
                if rec.pend.owner is not None \
                        and rec.pend.owner not in live:
                    rec.pend.owner = None
            # stale-epoch requests are dropped; live requesters re-send
            rec.queue = [q for q in rec.queue if q.e_id == node.e_id]
        for key in [k for k, m in self.deferred_replays.items()
                    if m.requester in dead]:
            self.deferred_replays.pop(key, None)
        # blocked arbiters replay requests whose requester died
        for key in list(self.recs):
            rec = self.recs[key]
            if rec.pend is not None and rec.pend.requester not in live:
                self.arb_replay(key)
        # live requesters re-send instead (new epoch, maybe new driver)
        for key, out in list(self.outst.items()):
            out.got.clear()
            out.ots = None
            self._retry_later(key, out.request_id)

    def on_resume(self) -> None:
        self.recovery_hold = False
        held, self.held_reqs = self.held_reqs, []
        for msg in held:
            if msg.e_id == self.node.e_id and msg.requester in self.node.live:
                self.on_req(msg.requester, msg)

    def poke(self, key: int) -> None:
        """Called when a pending commit on ``key`` drains; a deferred
        arb-replay INV against a previously busy owner can now proceed."""
        msg = self.deferred_replays.get(key)
        if msg is None or self.node.busy_for_transfer(key):
            return
        del self.deferred_replays[key]
        self.on_inv(src_driver(msg), msg)

    def write_blocked(self, key: int) -> bool:
        """True once this owner acknowledged a transfer away of ``key``:
        no new local write may start between the ACK and the VAL."""
        rec = self.recs.get(key)
        return (rec is not None and rec.pend is not None
                and rec.owner == self.node.node_id
                and rec.pend.owner != self.node.node_id)

    def followers_of(self, key: int):
        """Readers the owner must invalidate for a commit touching ``key``.

        While a placement change is staged, the union of the applied and
        proposed reader sets keeps a reader-to-be invalidated and a
        reader-being-evicted covered until the VAL lands everywhere.
        """
        rec = self.recs.get(key)
        if rec is None:
            return ()
        me = self.node.node_id
        pend = rec.pend
        if pend is None:
            return tuple(r for r in rec.readers if r != me)
        merged = list(rec.readers)
        for r in pend.readers:
            if r not in merged:
                merged.append(r)
        return tuple(r for r in merged if r != me)

    def replica_set(self, key: int) -> Optional[ReplicaSet]:
        rec = self.recs.get(key)
        if rec is None or rec.tombstone:
            return None
        return ReplicaSet(rec.owner, tuple(rec.readers))


def src_driver(msg: OwnMsg) -> int:
    # replayed INVs name the replayer as ack target; original INVs were
    # minted by the node id embedded in the o_ts
    return msg.ots[1]
