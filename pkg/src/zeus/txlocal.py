"""Local datastore and the transactional memory API.

Transactions run entirely on their coordinator: ``tr_create`` /
``tr_r_create`` open a context, ``tr_open_read`` / ``tr_open_write``
declare accesses (acquiring ownership through the ownership protocol when
the node lacks the level, and per-object local ownership across the
node's pipelines), and ``tr_commit`` performs the local commit before
handing the write set to the reliable commit engine.  Control returns to
the application immediately after the local commit; replication is
pipelined.

Writes go to private copies invisible until the local commit installs
them.  Reads are validated incrementally so that even transactions that
later abort only ever see a consistent snapshot (opacity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .messages import (WANT_CREATE, WANT_DESTROY, WANT_OWNER,
                       WANT_OWNER_READER, WANT_READER)
from .rcommit import TS_INVALID, TS_VALID, TS_WRITE

MAX_OBJECT_SIZE = 65536

LVL_READER = 1
LVL_OWNER = 2

ST_ACTIVE = 0
ST_LOCAL_COMMIT = 1
ST_RELIABLE = 2
ST_ABORTED = 3


class TxStall(Exception):
    """The pipeline must block until an ownership request completes."""

    def __init__(self, key: int, desired: int):
        self.key = key
        self.desired = desired


class TxConflict(Exception):
    """Retriable abort: local ownership conflict or invalidated read."""


class TxNotReplica(Exception):
    """Read-only transaction routed to a node without the data."""

    def __init__(self, key: int, owner_hint=None):
        self.key = key
        self.owner_hint = owner_hint


class TxGone(Exception):
    """The key was destroyed."""


class Store:
    """Per-node object store: data, versions and transactional state.

    Parallel dicts keyed by object key; ``level`` holds the local access
    level (absent means non-replica), ``condemned`` marks replicas being
    evicted or destroyed that must never serve reads again.
    """

    __slots__ = ("val", "ver", "tst", "level", "condemned")

    def __init__(self):
        self.val: Dict[int, object] = {}
        self.ver: Dict[int, int] = {}
        self.tst: Dict[int, int] = {}
        self.level: Dict[int, int] = {}
        self.condemned: Set[int] = set()

    def install(self, key, ver, value, node_id, verifier) -> None:
        cur = self.ver.get(key, -1)
        if ver < cur:
            verifier.violation("monotone", node_id, key, cur, ver)
            return
        self.val[key] = value
        self.ver[key] = ver
        self.tst[key] = TS_VALID
        self.condemned.discard(key)

    def drop(self, key) -> None:
        self.val.pop(key, None)
        self.ver.pop(key, None)
        self.tst.pop(key, None)
        self.level.pop(key, None)
        self.condemned.discard(key)

    def condemn(self, key) -> None:
        if key in self.tst:
            self.tst[key] = TS_INVALID
        self.condemned.add(key)

    def seed(self, key, ver, value, level) -> None:
        """Bootstrap-time placement, bypassing the protocols."""
        self.val[key] = value
        self.ver[key] = ver
        self.tst[key] = TS_VALID
        self.level[key] = level


class TxContext:
    """One transaction's private state: reads observed, write buffer."""

    __slots__ = ("mode", "node", "pipeline", "read_set", "write_set",
                 "ro_buf", "status", "t_invoke")

    def __init__(self, mode: str, node: int, pipeline: int = 0,
                 t_invoke: int = 0):
        self.mode = mode
        self.node = node
        self.pipeline = pipeline
        self.read_set: List[Tuple[int, int]] = []
        self.write_set: Dict[int, object] = {}
        self.ro_buf: List[Tuple[int, int, object]] = []
        self.status = ST_ACTIVE
        self.t_invoke = t_invoke


class Hold:
    """Local ownership of one key by one pipeline.

    Held from the first write open until the reliable commit of the last
    pipelined transaction touching the key completes.
    """

    __slots__ = ("pipeline", "active", "pending")

    def __init__(self, pipeline: int):
        self.pipeline = pipeline
        self.active = False
        self.pending = 0


class TxLayer:
    def __init__(self, node):
        self.node = node
        self.holds: Dict[int, Hold] = {}
        self.active: Dict[int, TxContext] = {}   # pipeline -> context
        self.next_obj = 1
        self.stats_aborts = 0

    # -- context management --------------------------------------------------

    def tr_create(self, pipeline: int) -> TxContext:
        if pipeline in self.active:
            raise RuntimeError("pipeline %d already runs a transaction"
                               % pipeline)
        ctx = TxContext("write", self.node.node_id, pipeline,
                        t_invoke=self.node.now())
        self.active[pipeline] = ctx
        return ctx

    def tr_r_create(self) -> TxContext:
        return TxContext("ro", self.node.node_id, t_invoke=self.node.now())

    # -- opens ----------------------------------------------------------------

    def _check_reads(self, ctx: TxContext) -> None:
        # opacity: everything read so far must still be current
        store = self.node.store
        for k, v in ctx.read_set:
            if store.ver.get(k) != v or store.tst.get(k) == TS_INVALID:
                raise TxConflict()

    def tr_open_write(self, ctx: TxContext, key: int):
        assert ctx.mode == "write" and ctx.status == ST_ACTIVE
        store = self.node.store
        if key in ctx.write_set:
            return ctx.write_set[key]
        if store.level.get(key) != LVL_OWNER:
            lvl = store.level.get(key)
            raise TxStall(key, WANT_OWNER_READER if lvl == LVL_READER
                          else WANT_OWNER)
        if self.node.own.write_blocked(key):
            raise TxConflict()  # transfer away acknowledged, VAL pending
        hold = self.holds.get(key)
        if hold is None:
            hold = self.holds[key] = Hold(ctx.pipeline)
        elif hold.pipeline != ctx.pipeline:
            self.stats_aborts += 1
            raise TxConflict()
        hold.active = True
        self._check_reads(ctx)
        value = store.val.get(key)
        ctx.write_set[key] = value  # private copy; mutate via tr_write
        return value

    def tr_write(self, ctx: TxContext, key: int, value) -> None:
        if key not in ctx.write_set:
            self.tr_open_write(ctx, key)
        ctx.write_set[key] = value

    def tr_open_read(self, ctx: TxContext, key: int):
        assert ctx.status == ST_ACTIVE
        store = self.node.store
        if ctx.mode == "ro":
            if store.level.get(key) is None:
                raise TxNotReplica(key)
            if store.tst.get(key) != TS_VALID:
                raise TxConflict()
            v = store.ver[key]
            d = store.val[key]
            ctx.ro_buf.append((key, v, d))
            return d
        if key in ctx.write_set:
            return ctx.write_set[key]
        lvl = store.level.get(key)
        if lvl is None:
            raise TxStall(key, WANT_READER)
        if store.tst.get(key) == TS_INVALID:
            raise TxConflict()
        self._check_reads(ctx)
        v = store.ver[key]
        ctx.read_set.append((key, v))
        return store.val[key]

    # -- commit / abort --------------------------------------------------------

    def tr_commit(self, ctx: TxContext):
        """Local commit; returns the tx id for write transactions (None
        when nothing was modified or nothing needs replication)."""
        if ctx.mode == "ro":
            return self._commit_ro(ctx)
        assert ctx.status == ST_ACTIVE
        store = self.node.store
        try:
            self._check_reads(ctx)
        except TxConflict:
            self.tr_abort(ctx)
            raise
        # install private copies: bump versions, mark pending replication
        writes = []
        ver = store.ver
        val = store.val
        tst = store.tst
        vf = self.node.verifier
        me = self.node.node_id
        for k, v in ctx.write_set.items():
            nv = ver.get(k, 0) + 1
            vf.on_owner_install(me, k, nv)
            ver[k] = nv
            val[k] = v
            tst[k] = TS_WRITE
            writes.append((k, v))
            self.holds[k].pending += 1
        ctx.status = ST_LOCAL_COMMIT
        self.active.pop(ctx.pipeline, None)
        for k, _v in writes:
            self.holds[k].active = False
        if not writes:
            return None
        ctx.status = ST_RELIABLE
        return self.node.rc.start(ctx.pipeline, writes)

    def _commit_ro(self, ctx: TxContext):
        store = self.node.store
        for k, v, _d in ctx.ro_buf:
            if store.tst.get(k) != TS_VALID:
                raise TxConflict()
        for k, v, _d in ctx.ro_buf:
            if store.ver.get(k) != v:
                raise TxConflict()
        ctx.status = ST_RELIABLE
        return None

    def tr_abort(self, ctx: TxContext) -> None:
        """Discard private copies; no visible effect remains."""
        if ctx.mode == "write":
            self.active.pop(ctx.pipeline, None)
            for k in ctx.write_set:
                hold = self.holds.get(k)
                if hold is not None and hold.pipeline == ctx.pipeline:
                    hold.active = False
                    if hold.pending == 0:
                        del self.holds[k]
        ctx.status = ST_ABORTED
        self.stats_aborts += 1

    def on_slot_validated(self, keys) -> None:
        """Reliable commit finished for these keys: release local holds."""
        own = self.node.own
        for k in keys:
            hold = self.holds.get(k)
            if hold is not None:
                hold.pending -= 1
                if hold.pending <= 0 and not hold.active:
                    del self.holds[k]
            own.poke(k)

    def held_by_other(self, key: int, pipeline: int) -> bool:
        hold = self.holds.get(key)
        return hold is not None and hold.pipeline != pipeline

    def busy(self, key: int) -> bool:
        """True while the key may not change owner: a local transaction
        holds it or a reliable commit is still pending."""
        if key in self.holds:
            return True
        return self.node.store.tst.get(key) == TS_WRITE

    # -- object lifecycle ------------------------------------------------------

    def malloc(self, size: int, payload=0, done=None, key: Optional[int]
               = None) -> int:
        if size > MAX_OBJECT_SIZE:
            raise ValueError("object size %d exceeds maximum" % size)
        node = self.node
        if key is None:
            key = (node.node_id << 48) | (0xF << 44) | self.next_obj
            self.next_obj += 1
        live_others = [n for n in sorted(node.live) if n != node.node_id]
        k = node.degree - 1
        readers: List[int] = []
        if live_others and k > 0:
            start = node.rng.randrange(len(live_others))
            for i in range(min(k, len(live_others))):
                readers.append(live_others[(start + i) % len(live_others)])
        node.own.begin(key, WANT_CREATE, done, payload=payload, size=size,
                       placement=tuple(readers))
        return key

    def free(self, key: int, done=None) -> None:
        if self.node.store.level.get(key) != LVL_OWNER:
            raise PermissionError("free() by non-owner of key %d" % key)
        if self.busy(key):
            raise TxConflict()
        self.node.own.begin(key, WANT_DESTROY, done)
