"""Reliable commit: invalidation-based replication of local commits.

A coordinator that locally committed a write transaction broadcasts one
R-INV per transaction to the union of the written objects' readers (the
followers), carrying new versions and data.  Followers apply in pipeline
order, invalidating the touched objects, and acknowledge cumulatively;
once every live follower acknowledged, the coordinator validates locally
and broadcasts R-VAL.  The stored R-INV is enough for any follower to
replay the commit verbatim if the coordinator dies, which makes the whole
phase idempotent: a locally committed transaction can never be aborted
remotely, only finished.

Pipelining: the application never waits for this phase.  Ordering is
enforced per (coordinator, pipeline): a follower applies slot n only
after slot n-1 is applied or known validated (directly, via the prev-VAL
bit, or via an R-VAL which also covers all earlier slots).
"""

from __future__ import annotations

from typing import Dict, List, Optional, Set, Tuple

from .messages import K_RACK, K_RINV, K_RVAL

TS_VALID = 0
TS_INVALID = 1
TS_WRITE = 2

GATED_BUFFER_LIMIT = 1024
PIPE_SHIFT = 4  # pipeline ids live in the low bits of the pipeline key


def pipe_key(coord: int, pip: int) -> int:
    return (coord << PIPE_SHIFT) | pip


class PipelineState:
    """Coordinator-side sequencing for one pipeline."""

    __slots__ = ("pip", "next_slot", "pending", "acked_upto", "val_next",
                 "extra_rval")

    def __init__(self, pip: int):
        self.pip = pip
        self.next_slot = 0
        self.pending: Dict[int, Tuple] = {}   # slot -> (followers, updates)
        self.acked_upto: Dict[int, int] = {}
        self.val_next = 0
        self.extra_rval: Dict[int, Set[int]] = {}


class FollowerPipe:
    """Follower-side view of one remote pipeline."""

    __slots__ = ("ok_upto", "stored", "deferred")

    def __init__(self):
        self.ok_upto = -1
        self.stored: Dict[int, Tuple] = {}    # slot -> (updates, followers)
        self.deferred: Dict[int, Tuple] = {}  # slot -> raw R-INV


class CommitEngine:
    def __init__(self, node, pipelines: int):
        self.node = node
        self.pips = [PipelineState(p) for p in range(pipelines)]
        self.fstate: Dict[int, FollowerPipe] = {}
        self.replays: Dict[int, Dict[int, Tuple]] = {}  # pk -> slot -> info
        self.owed_racks: Dict[int, Set[int]] = {}       # collector -> pks
        self._rack_gen: Dict[int, int] = {}
        self.ack_delay = 1
        # mutation knobs for the model-checking self tests only
        self.mutate_skip_version_check = False
        self.mutate_skip_gating = False
        self.stats_commits = 0
        self.stats_ro_commits = 0
        self.stats_ro_aborts = 0

    def _owe_rack(self, to: int, pk: int) -> None:
        """Cumulative acks coalesce: one R-ACK per pipeline per collector
        within the delay window acknowledges everything processed."""
        owed = self.owed_racks.get(to)
        if owed is None:
            owed = self.owed_racks[to] = set()
        if not owed:
            gen = self._rack_gen.get(to, 0) + 1
            self._rack_gen[to] = gen
            self.node.loop.after(self.ack_delay, self._flush_racks,
                                 (to, gen))
        owed.add(pk)

    def _flush_racks(self, arg) -> None:
        to, gen = arg
        if self._rack_gen.get(to) != gen:
            return
        owed = self.owed_racks.get(to)
        if not owed:
            return
        node = self.node
        e_id = node.e_id
        send = node.send
        fstate = self.fstate
        for pk in sorted(owed):
            f = fstate.get(pk)
            if f is not None:
                send(to, (K_RACK, pk >> PIPE_SHIFT,
                          pk & ((1 << PIPE_SHIFT) - 1), f.ok_upto, e_id))
        owed.clear()

    # -- coordinator ---------------------------------------------------------

    def start(self, pip_id: int, writes) -> Optional[Tuple[int, int, int]]:
        """Begin the reliable commit of locally committed ``writes``.

        ``writes`` is a list of (key, value); versions were already bumped
        and t_state set to Write by the local commit.  Returns the minted
        tx id, or None when no follower needs invalidating.
        """
        node = self.node
        self.stats_commits += 1
        followers: List[int] = []
        own = node.own
        for key, _v in writes:
            for f in own.followers_of(key):
                if f not in followers:
                    followers.append(f)
        store = node.store
        if not followers:
            tst = store.tst
            for key, _v in writes:
                tst[key] = TS_VALID
            node.verifier.on_complete(node.node_id,
                                      tuple((k, store.ver[k])
                                            for k, _ in writes))
            node.on_slot_validated([k for k, _ in writes])
            return None
        pipe = self.pips[pip_id]
        slot = pipe.next_slot
        pipe.next_slot = slot + 1
        prev_val = 1 if pipe.val_next == slot else 0
        ver = store.ver
        updates = tuple((k, ver[k], v) for k, v in writes)
        ftup = tuple(followers)
        pipe.pending[slot] = (ftup, updates)
        node.verifier.on_mint(pipe_key(node.node_id, pip_id), slot)
        if not prev_val and slot - 1 in pipe.pending:
            prev_followers = pipe.pending[slot - 1][0]
            extra = [f for f in followers if f not in prev_followers]
            if extra:
                pipe.extra_rval.setdefault(slot - 1, set()).update(extra)
        msg = (K_RINV, node.node_id, pip_id, slot, node.e_id, prev_val,
               ftup, updates)
        send = node.send
        for f in followers:
            send(f, msg)
        return (node.node_id, pip_id, slot)

    def on_rack(self, src: int, m) -> None:
        # acks state a stable fact about the sender's progress, so unlike
        # R-INVs they stay meaningful across epochs
        node = self.node
        coord, pip, upto = m[1], m[2], m[3]
        if coord == node.node_id:
            pipe = self.pips[pip]
            if pipe.acked_upto.get(src, -1) >= upto:
                return
            pipe.acked_upto[src] = upto
            self._advance(pipe)
            return
        # cumulative ack towards a replayer
        pk = pipe_key(coord, pip)
        reps = self.replays.get(pk)
        if not reps:
            return
        for slot in sorted(reps):
            if slot > upto:
                break
            info = reps[slot]
            info[2].add(src)
        self._replay_advance(pk)

    def _advance(self, pipe: PipelineState) -> None:
        node = self.node
        live = node.live
        acked = pipe.acked_upto
        while True:
            slot = pipe.val_next
            pend = pipe.pending.get(slot)
            if pend is None:
                break
            followers, updates = pend
            done = True
            for f in followers:
                if f in live and acked.get(f, -1) < slot:
                    done = False
                    break
            if not done:
                break
            self._validate_own(pipe, slot, followers, updates)

    def _validate_own(self, pipe, slot, followers, updates) -> None:
        node = self.node
        store = node.store
        ver = store.ver
        tst = store.tst
        keys = []
        for k, nv, _v in updates:
            keys.append(k)
            # a newer pipelined write may have put the object back in
            # Write; only an unchanged version becomes Valid again
            if ver[k] == nv and tst[k] == TS_WRITE:
                tst[k] = TS_VALID
        del pipe.pending[slot]
        pipe.val_next = slot + 1
        node.verifier.on_complete(node.node_id,
                                  tuple((k, nv) for k, nv, _v in updates))
        extra = pipe.extra_rval.pop(slot, None)
        # validations are cumulative at the followers, so an interior
        # R-VAL may ride along with a later slot's, provided the next one
        # reaches every follower of this slot
        nxt = pipe.pending.get(slot + 1)
        if extra is None and (slot & 3) != 3 and nxt is not None \
                and all(f in nxt[0] for f in followers):
            node.on_slot_validated(keys)
            return
        targets = set(followers)
        if extra:
            targets.update(extra)
        msg = (K_RVAL, node.node_id, pipe.pip, slot, node.e_id)
        send = node.send
        for f in sorted(targets):
            send(f, msg)
        node.on_slot_validated(keys)

    # -- follower ------------------------------------------------------------

    def on_rinv(self, src: int, m) -> None:
        node = self.node
        if m[4] != node.e_id:
            return  # message from another epoch is ignored
        coord, pip, slot = m[1], m[2], m[3]
        pk = pipe_key(coord, pip)
        f = self.fstate.get(pk)
        if f is None:
            f = self.fstate[pk] = FollowerPipe()
        if slot <= f.ok_upto or slot in f.stored:
            # duplicate or already validated: just (re-)acknowledge
            self._owe_rack(src, pk)
            return
        gate_ok = (slot == 0 or m[5] == 1 or slot - 1 <= f.ok_upto)
        if not gate_ok and not self.mutate_skip_gating:
            if len(f.deferred) >= GATED_BUFFER_LIMIT:
                raise RuntimeError(
                    "gated R-INV buffer overflow on pipeline %d" % pk)
            f.deferred[slot] = (src, m)
            return
        self._apply_rinv(f, src, m)
        self._drain_deferred(f)

    def _apply_rinv(self, f: FollowerPipe, src: int, m) -> None:
        node = self.node
        coord, pip, slot, _e, prev, followers, updates = m[1:]
        node.verifier.on_pipe_apply(
            node.node_id, pipe_key(coord, pip), slot,
            slot == 0 or prev == 1 or slot - 1 <= f.ok_upto)
        if prev:
            self._satisfy_upto(f, slot - 1)
        store = node.store
        ver = store.ver
        val = store.val
        tst = store.tst
        vf = node.verifier
        me = node.node_id
        for k, nv, v in updates:
            cur = ver.get(k, -1)
            if cur >= nv:
                continue  # local version is newer or equal: skip
            vf.on_follower_apply(me, k, cur, nv)
            ver[k] = nv
            val[k] = v
            tst[k] = TS_INVALID
        f.stored[slot] = (updates, followers)
        if slot > f.ok_upto:
            f.ok_upto = slot
        self._owe_rack(src, pipe_key(coord, pip))

    def _drain_deferred(self, f: FollowerPipe) -> None:
        while f.deferred:
            entry = f.deferred.pop(f.ok_upto + 1, None)
            if entry is None:
                return
            src, m = entry
            if m[4] != self.node.e_id:
                continue
            if m[3] in f.stored or m[3] <= f.ok_upto:
                continue
            self._apply_rinv(f, src, m)

    def on_rval(self, src: int, m) -> None:
        # a validation records completed replication: never stale
        node = self.node
        pk = pipe_key(m[1], m[2])
        f = self.fstate.get(pk)
        if f is None:
            f = self.fstate[pk] = FollowerPipe()
        self._satisfy_upto(f, m[3])
        self._drain_deferred(f)

    def _satisfy_upto(self, f: FollowerPipe, upto: int) -> None:
        """An R-VAL (or prev-VAL bit) for ``upto`` confirms every earlier
        slot of the pipeline as well; validate whatever is still stored."""
        if f.stored:
            for s in sorted(f.stored):
                if s > upto:
                    break
                self._validate_stored(f, s)
        if f.deferred:
            for s in [s for s in f.deferred if s <= upto]:
                del f.deferred[s]
        if upto > f.ok_upto:
            f.ok_upto = upto

    def _validate_stored(self, f: FollowerPipe, slot: int) -> None:
        node = self.node
        updates, _followers = f.stored.pop(slot)
        store = node.store
        ver = store.ver
        tst = store.tst
        condemned = store.condemned
        vf = node.verifier
        me = node.node_id
        skip_check = self.mutate_skip_version_check
        for k, nv, _v in updates:
            if (skip_check or ver.get(k) == nv) and tst.get(k) == TS_INVALID:
                if k in condemned:
                    continue
                vf.on_follower_validate(me, k, ver[k])
                tst[k] = TS_VALID

    # -- read-only transactions ----------------------------------------------

    RO_OK = 0
    RO_CONFLICT = 1
    RO_NOT_REPLICA = 2

    def read_only(self, keys):
        """Two-phase local read-only transaction; zero network messages.

        Returns (status, snapshot).  Phase one buffers version and data
        per key; phase two checks that every object is Valid and that no
        version moved, aborting on any concurrent reliable commit.
        """
        node = self.node
        store = node.store
        level = store.level
        ver = store.ver
        for k in keys:
            if level.get(k) is None:
                self.stats_ro_aborts += 1
                return self.RO_NOT_REPLICA, None
        buf = [(k, ver[k], store.val[k]) for k in keys]
        tst = store.tst
        for k, v, _d in buf:
            if tst[k] != TS_VALID:
                self.stats_ro_aborts += 1
                return self.RO_CONFLICT, None
        for k, v, _d in buf:
            if ver[k] != v:
                self.stats_ro_aborts += 1
                return self.RO_CONFLICT, None
        self.stats_ro_commits += 1
        return self.RO_OK, buf

    # -- failure handling ----------------------------------------------------

    def on_view(self, live: Set[int], dead: Set[int]) -> None:
        """Prune dead followers and line up replays of dead coordinators.

        Gated-but-unapplied R-INVs are discarded: only received *and
        applied* invalidations count as pending commits to replay.
        """
        node = self.node
        for f in self.fstate.values():
            f.deferred.clear()
        for pk, f in self.fstate.items():
            coord = pk >> PIPE_SHIFT
            if coord in dead and f.stored:
                reps = self.replays.setdefault(pk, {})
                for slot, (updates, followers) in f.stored.items():
                    reps[slot] = (updates,
                                  tuple(x for x in followers
                                        if x in live and x != node.node_id),
                                  set())

    def replay_all(self) -> None:
        """Re-send pending R-INVs with the new epoch id (own and adopted)."""
        node = self.node
        live = node.live
        send = node.send
        me = node.node_id
        for pipe in self.pips:
            if not pipe.pending:
                continue
            resent = dict(pipe.pending)
            for slot in sorted(resent):
                followers, updates = resent[slot]
                followers = tuple(x for x in followers if x in live)
                pipe.pending[slot] = (followers, updates)
                prev_val = 1 if pipe.val_next == slot else 0
                msg = (K_RINV, me, pipe.pip, slot, node.e_id, prev_val,
                       followers, updates)
                for x in followers:
                    if pipe.acked_upto.get(x, -1) < slot:
                        send(x, msg)
            self._advance(pipe)
        for pk in sorted(self.replays):
            self._replay_broadcast(pk)
            self._replay_advance(pk)

    def _replay_broadcast(self, pk: int) -> None:
        node = self.node
        coord = pk >> PIPE_SHIFT
        pip = pk & ((1 << PIPE_SHIFT) - 1)
        reps = self.replays.get(pk, {})
        f = self.fstate.get(pk)
        for slot in sorted(reps):
            updates, need, got = reps[slot]
            prev_known = not (f is not None and slot - 1 in f.stored)
            msg = (K_RINV, coord, pip, slot, node.e_id,
                   1 if prev_known else 0, need, updates)
            for x in need:
                if x not in got:
                    node.send(x, msg)

    def _replay_advance(self, pk: int) -> None:
        node = self.node
        live = node.live
        reps = self.replays.get(pk)
        if reps is None:
            return
        coord = pk >> PIPE_SHIFT
        pip = pk & ((1 << PIPE_SHIFT) - 1)
        f = self.fstate.get(pk)
        rval_targets = set()
        for slot, (updates, need, _got) in reps.items():
            rval_targets.update(need)
        for slot in sorted(reps):
            updates, need, got = reps[slot]
            if any(x in live and x not in got for x in need):
                break
            del reps[slot]
            node.verifier.on_complete(node.node_id,
                                      tuple((k, nv)
                                            for k, nv, _v in updates))
            if f is not None and slot in f.stored:
                self._validate_stored(f, slot)
                if slot > f.ok_upto:
                    f.ok_upto = slot
            msg = (K_RVAL, coord, pip, slot, node.e_id)
            for x in sorted(rval_targets):
                if x in live:
                    node.send(x, msg)
        if not reps:
            self.replays.pop(pk, None)
            node.check_recovery_done()

    def recovery_pending(self) -> bool:
        return bool(self.replays)

    def busy(self, key: int) -> bool:
        return self.node.store.tst.get(key) == TS_WRITE
