"""Consistency checking: invariants, strict serializability, small models.

Three layers:

* :class:`Verifier` - a streaming invariant monitor the engines feed
  directly.  It maintains O(1)-per-event aggregates for the protocol
  invariants (single owner, arbiter agreement, monotone versions, owner
  freshness, completion-before-validation, pipeline prefix order) and a
  final quiescence sweep (replica convergence, replication degree).
  With an attached sink it also emits one record per event, and
  :func:`replay_trace` re-checks such a record stream offline.

* History checkers - :func:`check_strict_serializability` searches for a
  legal total order consistent with real-time precedence and per-key
  version sequences (versions make this near-linear);
  :func:`check_opacity` verifies that every transaction, aborted ones
  included, observed versions that coexisted at some instant.

* :func:`small_model_enumerate` - an exhaustive DFS over message, timer
  and crash interleavings of the real protocol engines at a tiny scale,
  with state-fingerprint memoization.  Protocol mutants are expected to
  fail here; the stock engines must not.
"""

from __future__ import annotations

import json
import time
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from .ownership import OutReq, OwnRec, Pending
from .rcommit import FollowerPipe
from .txlocal import Hold


class Verifier:
    """Streaming invariant monitor shared by every node of a deployment."""

    def __init__(self, live: Optional[Set[int]] = None, emit=None):
        self.live: Set[int] = live if live is not None else set()
        self.emit = emit
        self.violations: List[tuple] = []
        self.events = 0
        # ownership: per key, the Valid-state metadata at each holder
        # (directory nodes and the owner; a staged holder is removed
        # until its VAL applies) plus the live ownership claims
        self.meta: Dict[int, Dict[int, tuple]] = {}
        self.claims: Dict[int, Set[int]] = {}
        self.directory: Tuple[int, ...] = ()
        # data-path aggregates
        self.key_maxver: Dict[int, int] = {}
        self.completed_upto: Dict[int, int] = {}
        self.mint_next: Dict[int, int] = {}
        self.mint_node: Dict[int, int] = {}
        self.mint_suspect: Set[int] = set()

    def violation(self, kind: str, *info) -> None:
        self.violations.append((kind,) + info)

    # -- bootstrap -------------------------------------------------------------

    def prime(self, key: int, owner: int, readers: Tuple[int, ...]) -> None:
        entry = ((0, 0), owner, tuple(readers))
        self.meta[key] = {n: entry for n in set(self.directory) | {owner}}
        self.claims[key] = {owner}
        self.key_maxver[key] = 0
        self.completed_upto[key] = 0

    # -- ownership hooks ---------------------------------------------------------

    def _norm(self, entry) -> tuple:
        # dead nodes are pruned lazily at each holder; compare modulo them
        ots, owner, readers = entry
        return (ots, owner if owner in self.live else None,
                tuple(r for r in readers if r in self.live))

    def own_invalidate(self, node: int, key: int) -> None:
        self.events += 1
        if self.emit is not None:
            self.emit(("o_inv", node, key))
        m = self.meta.get(key)
        if m is not None:
            m.pop(node, None)
        c = self.claims.get(key)
        if c is not None:
            c.discard(node)

    def own_apply(self, node: int, key: int, ots, owner, readers) -> None:
        self.events += 1
        if self.emit is not None:
            self.emit(("o_apply", node, key, ots, owner, readers))
        m = self.meta.setdefault(key, {})
        c = self.claims.setdefault(key, set())
        holder = node in self.directory or node == owner
        if holder:
            for peer, entry in m.items():
                if peer == node or peer not in self.live:
                    continue
                if entry[0] > ots:
                    # a current metadata holder may never move backward
                    self.violation("applied-older-ots", key, node, ots,
                                   entry[0])
                    return
                if entry[0] == ots and self._norm(entry) != self._norm(
                        (ots, owner, readers)):
                    self.violation("arbiter-disagreement", key, ots, node,
                                   (owner, readers), entry[1:])
            stale = [p for p, e in m.items()
                     if p in self.live and p != node and e[0] < ots]
            if stale:
                self.violation("stale-valid-arbiter", key, ots, stale)
            m[node] = (ots, owner, tuple(readers))
            # the requester must apply before any arbiter
            if owner is not None and owner != node and owner in self.live \
                    and owner not in c:
                self.violation("arbiter-applied-before-requester",
                               key, ots, node, owner)
        if owner == node:
            c.add(node)
            others = [p for p in c if p != node and p in self.live]
            if others:
                self.violation("two-owners", key, node, others)
        else:
            c.discard(node)
            if node in m and not holder:
                del m[node]

    def own_prune(self, node: int, key: int, ots, owner, readers,
                  dead) -> None:
        self.events += 1
        if self.emit is not None:
            self.emit(("o_prune", node, key, ots, owner, readers))
        m = self.meta.get(key)
        if m is not None and node in m and m[node][0] == ots:
            m[node] = (ots, owner, tuple(readers))

    def level_change(self, node: int, key: int, level) -> None:
        if self.emit is not None:
            self.emit(("level", node, key, level))

    # -- data-path hooks ----------------------------------------------------------

    def on_owner_install(self, node: int, key: int, new: int) -> None:
        if self.emit is not None:
            self.emit(("w_install", node, key, new))
        cur = self.key_maxver.get(key, 0)
        if new == cur + 1:
            self.key_maxver[key] = new
        elif key in self.mint_suspect \
                and new == self.completed_upto.get(key, 0) + 1:
            # versions minted by a crashed owner may be legally lost
            # (applied nowhere live, never completed); the takeover
            # rebases on the completed frontier
            self.key_maxver[key] = new
        else:
            self.violation("version-mint", key, node, cur, new)
            self.key_maxver[key] = max(cur, new)
        self.mint_suspect.discard(key)
        self.mint_node[key] = node

    def on_follower_apply(self, node: int, key: int, old: int,
                          new: int) -> None:
        if self.emit is not None:
            self.emit(("f_apply", node, key, old, new))
        if new <= old:
            self.violation("monotone", node, key, old, new)
        if new > self.key_maxver.get(key, 0):
            # a reader can never run ahead of the owner
            self.violation("owner-freshness", node, key, new,
                           self.key_maxver.get(key, 0))

    def on_complete(self, node: int, pairs) -> None:
        if self.emit is not None:
            self.emit(("complete", node, pairs))
        cu = self.completed_upto
        for k, v in pairs:
            if v > cu.get(k, 0):
                cu[k] = v

    def on_follower_validate(self, node: int, key: int, ver: int) -> None:
        if self.emit is not None:
            self.emit(("f_valid", node, key, ver))
        if ver > self.completed_upto.get(key, 0):
            self.violation("premature-validation", node, key, ver,
                           self.completed_upto.get(key, 0))

    def on_mint(self, pk: int, slot: int) -> None:
        if self.emit is not None:
            self.emit(("mint", pk, slot))
        nxt = self.mint_next.get(pk, 0)
        if slot != nxt:
            self.violation("txid-sequence", pk, nxt, slot)
        self.mint_next[pk] = slot + 1

    def on_pipe_apply(self, node: int, pk: int, slot: int,
                      gate_ok: bool) -> None:
        if self.emit is not None:
            self.emit(("pipe", node, pk, slot, 1 if gate_ok else 0))
        if not gate_ok:
            self.violation("pipeline-order", node, pk, slot)

    # -- membership ---------------------------------------------------------------

    def on_crash(self, node: int) -> None:
        if self.emit is not None:
            self.emit(("v_crash", node))
        self.live.discard(node)
        for key, by in self.mint_node.items():
            if by == node:
                self.mint_suspect.add(key)

    # -- final sweep ----------------------------------------------------------------

    def final_sweep(self, cluster) -> None:
        """Quiescence checks: replica convergence, agreement, degree."""
        crashed = any(not n.alive for n in cluster.nodes)
        live_nodes = [n for n in cluster.nodes if n.alive]
        dirs = [n for n in live_nodes
                if n.node_id in cluster.config.directory]
        keys: Set[int] = set()
        for n in live_nodes:
            keys.update(n.store.level.keys())
        for key in keys:
            recs = [(d.node_id, d.own.recs.get(key)) for d in dirs]
            metas = [(r.ots, r.owner, tuple(r.readers), r.tombstone)
                     for _nid, r in recs if r is not None]
            if metas and len(set(metas)) != 1:
                self.violation("sweep-directory-disagreement", key, metas)
                continue
            if not metas:
                continue
            ots, owner, readers, tomb = metas[0]
            if tomb:
                continue
            replicas = [n for n in live_nodes
                        if n.store.level.get(key) is not None]
            owners = [n.node_id for n in replicas
                      if n.store.level.get(key) == 2]
            if len(owners) > 1:
                self.violation("sweep-two-owners", key, owners)
            if owner is not None and owner in self.live \
                    and owners != [owner]:
                self.violation("sweep-owner-mismatch", key, owner, owners)
            vals = {}
            for n in replicas:
                if n.store.tst.get(key) == 0:  # TS_VALID
                    vals[n.node_id] = (n.store.ver.get(key),
                                       n.store.val.get(key))
                elif key not in n.store.condemned:
                    self.violation("sweep-not-valid", key, n.node_id,
                                   n.store.tst.get(key))
            if len(set(vals.values())) > 1:
                self.violation("sweep-divergent-replicas", key, vals)
            if owner is not None and owner in vals:
                over = vals[owner][0]
                for nid, (v, _d) in vals.items():
                    if v > over:
                        self.violation("sweep-owner-freshness", key,
                                       owner, nid, over, v)
            if not crashed and 1 + len(readers) != cluster.config.degree \
                    and cluster.config.degree <= cluster.config.nodes:
                self.violation("sweep-degree", key, owner, readers)


# -- offline trace checking ------------------------------------------------


def replay_trace(records, live: Set[int],
                 directory: Tuple[int, ...]) -> Verifier:
    """Re-run the invariant monitor over an emitted record stream."""
    vf = Verifier(live=set(live))
    vf.directory = tuple(directory)
    handlers = {
        "o_inv": lambda r: vf.own_invalidate(r[1], r[2]),
        "o_apply": lambda r: vf.own_apply(r[1], r[2], tuple(r[3]), r[4],
                                          tuple(r[5])),
        "o_prune": lambda r: vf.own_prune(r[1], r[2], tuple(r[3]), r[4],
                                          tuple(r[5]), ()),
        "w_install": lambda r: vf.on_owner_install(r[1], r[2], r[3]),
        "f_apply": lambda r: vf.on_follower_apply(r[1], r[2], r[3], r[4]),
        "complete": lambda r: vf.on_complete(r[1],
                                             [tuple(p) for p in r[2]]),
        "f_valid": lambda r: vf.on_follower_validate(r[1], r[2], r[3]),
        "mint": lambda r: vf.on_mint(r[1], r[2]),
        "pipe": lambda r: vf.on_pipe_apply(r[1], r[2], r[3], bool(r[4])),
        "v_crash": lambda r: vf.on_crash(r[1]),
        "prime": lambda r: vf.prime(r[1], r[2], tuple(r[3])),
    }
    for i, rec in enumerate(records):
        h = handlers.get(rec[0])
        if h is not None:
            h(rec)
        if vf.violations:
            vf.violations[-1] = vf.violations[-1] + ("at-record", i)
            break
    return vf


def check_invariants(lines, live: Set[int],
                     directory: Tuple[int, ...] = (0, 1, 2)):
    """Offline entry point over line-delimited JSON trace records.

    Returns (ok, report): on a violation the report carries the minimal
    offending prefix length and the violating record.
    """
    records = []
    for line in lines:
        line = line.strip()
        if line:
            records.append(json.loads(line))
    vf = replay_trace(records, live, directory)
    if vf.violations:
        v = vf.violations[0]
        idx = v[-1] if v[-2] == "at-record" else len(records)
        return False, {"violation": v[:-2], "prefix_len": idx + 1,
                       "record": records[idx] if idx < len(records)
                       else None}
    return True, {"records": len(records)}


# -- strict serializability -------------------------------------------------


@dataclass
class HistoryEvent:
    """One completed operation: invocation/response interval plus the
    versions it read and wrote."""

    mode: str
    invoke: int
    commit: int
    reads: List[Tuple[int, int]] = field(default_factory=list)
    writes: List[Tuple[int, int]] = field(default_factory=list)
    node: int = -1
    kind: str = ""


def _as_events(history) -> List[HistoryEvent]:
    out = []
    for h in history:
        if isinstance(h, HistoryEvent):
            out.append(h)
        else:
            out.append(HistoryEvent(h["mode"], h["invoke"], h["commit"],
                                    [tuple(r) for r in h.get("reads", [])],
                                    [tuple(w) for w in h.get("writes", [])],
                                    h.get("node", -1), h.get("kind", "")))
    return out


def check_strict_serializability(history, completed=None,
                                 max_steps: int = 5_000_000):
    """Search for a total order consistent with real time and versions.

    ``completed`` optionally maps key -> highest reliably committed
    version; write transactions above it are treated as lost and their
    values must be invisible.  Returns (verdict, witness) with verdict
    "pass", "fail" or "inconclusive".
    """
    events = _as_events(history)
    txs: List[HistoryEvent] = []
    writer: Dict[Tuple[int, int], int] = {}
    for ev in events:
        if ev.mode == "write" and completed is not None:
            if any(v > completed.get(k, 0) for k, v in ev.writes):
                # lost commit: fails the check only if anyone read it
                for k, v in ev.writes:
                    writer[(k, v)] = -1
                continue
        txs.append(ev)
    n = len(txs)
    per_key: Dict[int, List[Tuple[int, int]]] = {}
    for i, ev in enumerate(txs):
        for k, v in ev.writes:
            if (k, v) in writer:
                return "fail", {"why": "duplicate-version", "key": k,
                                "version": v}
            writer[(k, v)] = i
            per_key.setdefault(k, []).append((v, i))
    edges: Dict[int, List[int]] = {i: [] for i in range(n)}
    why: Dict[Tuple[int, int], str] = {}

    def add(a: int, b: int, reason: str) -> None:
        if a != b:
            edges[a].append(b)
            why.setdefault((a, b), reason)

    for k, lst in per_key.items():
        lst.sort()
        for (v1, i1), (v2, i2) in zip(lst, lst[1:]):
            add(i1, i2, "version-order")
    for i, ev in enumerate(txs):
        for k, v in ev.reads:
            w = writer.get((k, v))
            if w == -1 or (v > 0 and w is None):
                return "fail", {"why": "read-of-lost-or-unknown-version",
                                "key": k, "version": v, "reader": i,
                                "reader_kind": txs[i].kind}
            if w is not None:
                add(w, i, "write-read")
            lst = per_key.get(k, [])
            # anti-dependency: the reader precedes the next writer of k
            for (v2, j) in lst:
                if v2 > v:
                    add(i, j, "anti-dependency")
                    break
    # real-time edges through a timeline chain
    times = sorted({ev.invoke for ev in txs} | {ev.commit for ev in txs})
    t_index = {t: n + j for j, t in enumerate(times)}
    chain_edges: Dict[int, List[int]] = {n + j: [] for j in range(len(times))}
    for j in range(len(times) - 1):
        chain_edges[n + j].append(n + j + 1)
    total: Dict[int, List[int]] = {**edges, **chain_edges}
    for i, ev in enumerate(txs):
        total[t_index[ev.invoke]].append(i)
        # response connects to the first strictly later timestamp
        j = bisect_right(times, ev.commit)
        if j < len(times):
            total[i].append(n + j)
    # iterative cycle detection
    color = {}
    steps = 0
    for start in list(total):
        if color.get(start):
            continue
        stack = [(start, iter(total.get(start, ())))]
        color[start] = 1
        path = [start]
        while stack:
            steps += 1
            if steps > max_steps:
                return "inconclusive", {"why": "step-budget-exhausted"}
            node, it = stack[-1]
            adv = next(it, None)
            if adv is None:
                color[node] = 2
                stack.pop()
                path.pop()
                continue
            c = color.get(adv, 0)
            if c == 1:
                cyc = path[path.index(adv):] + [adv]
                witness = []
                for a, b in zip(cyc, cyc[1:]):
                    if a < n and b < n:
                        witness.append((txs[a].kind or a, txs[b].kind or b,
                                        why.get((a, b), "real-time")))
                    elif a < n:
                        witness.append((txs[a].kind or a, "t", "real-time"))
                    elif b < n:
                        witness.append(("t", txs[b].kind or b, "real-time"))
                return "fail", {"why": "cycle", "witness": witness}
            if c == 0:
                color[adv] = 1
                stack.append((adv, iter(total.get(adv, ()))))
                path.append(adv)
    return "pass", {"transactions": n}


def check_opacity(history, aborted=None):
    """Every transaction (aborted included) saw versions that coexisted.

    Version v of key k exists from its writer's commit until the commit
    of version v+1; a read set is opaque when the intersection of its
    versions' lifetimes is non-empty.
    """
    events = _as_events(history)
    birth: Dict[Tuple[int, int], int] = {}
    death: Dict[Tuple[int, int], int] = {}
    for ev in events:
        for k, v in ev.writes:
            birth[(k, v)] = ev.commit
            death[(k, v - 1)] = ev.commit
    bad = []
    every = list(events) + list(aborted or [])
    for ev in every:
        reads = ev.reads if isinstance(ev, HistoryEvent) else ev["reads"]
        lo, hi = 0, float("inf")
        for k, v in reads:
            lo = max(lo, birth.get((k, v), 0))
            hi = min(hi, death.get((k, v), float("inf")))
        if lo > hi:
            bad.append({"reads": list(reads), "window": (lo, hi)})
    return (not bad), bad


# -- small-model enumeration --------------------------------------------------


def _freeze(o, depth: int = 0):
    if depth > 12:
        return "..."
    t = type(o)
    if o is None or t in (int, str, bytes, bool, float):
        return o
    if t is tuple:
        return tuple(_freeze(x, depth + 1) for x in o)
    if t is list:
        return ("L",) + tuple(_freeze(x, depth + 1) for x in o)
    if t in (set, frozenset):
        return ("S",) + tuple(sorted((_freeze(x, depth + 1) for x in o),
                                     key=repr))
    if t is dict:
        return ("D",) + tuple(
            (_freeze(k, depth + 1), _freeze(v, depth + 1))
            for k, v in sorted(o.items(), key=lambda kv: repr(kv[0])))
    fields = _STATE_FIELDS.get(t.__name__)
    if fields is not None:
        return (t.__name__,) + tuple(
            _freeze(getattr(o, f, None), depth + 1) for f in fields)
    if hasattr(o, "__qualname__"):
        return o.__qualname__
    return repr(o)


_STATE_FIELDS = {
    "OwnRec": ("ots", "owner", "readers", "state", "pend", "queue",
               "tombstone"),
    "Pending": ("request_id", "requester", "ots", "owner", "readers",
                "need", "ack_target", "desired", "driver", "got",
                "collecting", "data", "ver"),
    "OutReq": ("key", "request_id", "desired", "driver", "need", "got",
               "ots", "owner", "readers", "data", "ver", "attempt",
               "surfaced"),
    "OwnMsg": ("kind", "request_id", "requester", "key", "e_id", "ots",
               "owner", "readers", "need", "ack_target", "replay",
               "desired", "ver", "data"),
    "PipelineState": ("pip", "next_slot", "pending", "acked_upto",
                      "val_next", "extra_rval"),
    "FollowerPipe": ("ok_upto", "stored", "deferred"),
    "Store": ("val", "ver", "tst", "level", "condemned"),
    "Hold": ("pipeline", "active", "pending"),
}


@dataclass
class ModelConfig:
    scenario: str = "ownership"      # "ownership" | "rcommit"
    directory: Tuple[int, ...] = (0, 1, 2)
    owner: int = 3
    requesters: Tuple[int, ...] = (4,)
    readers: Tuple[int, ...] = ()
    crash_candidates: Tuple[int, ...] = ()
    max_crashes: int = 1
    allow_dup: bool = True
    mutant: str = ""
    max_states: int = 3_000_000
    time_budget: float = 240.0
    # rcommit scenario shape
    followers_a: Tuple[int, ...] = (1, 2)
    followers_b: Tuple[int, ...] = (2, 3)


@dataclass
class ModelReport:
    states: int = 0
    transitions: int = 0
    complete: bool = True
    violations: List[tuple] = field(default_factory=list)
    deadlocks: List[tuple] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations and not self.deadlocks


class _FixedRng:
    """Deterministic stand-in for the per-node RNG inside model worlds:
    driver choice always picks the first live directory node, so state
    snapshots need not carry generator state."""

    def randrange(self, n):
        return 0

    def random(self):
        return 0.0


def _fp_pend(p):
    if p is None:
        return None
    return (p.request_id, p.requester, p.ots, p.owner, p.readers, p.need,
            p.ack_target, p.desired, tuple(sorted(p.got)), p.collecting,
            p.data, p.ver)


def _fp_msg(m):
    t = type(m)
    if t is tuple:
        return tuple(_fp_msg(x) for x in m)
    if t is int or t is str or m is None or t is bool:
        return m
    if t.__name__ == "OwnMsg":
        return (m.kind, m.request_id, m.requester, m.key, m.e_id, m.ots,
                m.owner, m.readers, m.need, m.ack_target, m.replay,
                m.desired, m.ver, m.data)
    return repr(m)


def _copy_rec(rec):
    r = OwnRec(rec.ots, rec.owner, rec.readers)
    r.state = rec.state
    r.tombstone = rec.tombstone
    if rec.queue:
        r.queue = list(rec.queue)
    if rec.pend is not None:
        r.pend = _copy_pend(rec.pend)
    return r


def _copy_pend(p):
    q = Pending(p.request_id, p.requester, p.ots, p.owner, p.readers,
                p.need, p.ack_target, p.desired, p.driver, p.data, p.ver,
                p.size)
    q.got = set(p.got)
    q.collecting = p.collecting
    return q


def _copy_out(o):
    n = OutReq(o.key, o.request_id, o.desired, o.driver, o.t_start,
               o.data_payload, o.size, o.placement)
    n.waiters = list(o.waiters)
    n.need = o.need
    n.got = set(o.got)
    n.ots = o.ots
    n.owner = o.owner
    n.readers = o.readers
    n.data = o.data
    n.ver = o.ver
    n.attempt = o.attempt
    n.surfaced = o.surfaced
    return n


class _ModelLoop:
    """Captures timers as explicit model actions instead of running them."""

    def __init__(self, world):
        self.world = world
        self.now = 0

    def after(self, delay, fn, arg=None):
        self.world.timers.append((fn, arg))

    def at(self, t, fn, arg=None):
        self.world.timers.append((fn, arg))


class _ModelNet:
    def attach(self, *_a):
        pass

    def send(self, *_a):
        pass


class _ModelOracle:
    def __init__(self, world):
        self.world = world

    def recovery_done(self, node, e_id):
        self.world.recovery_done(node, e_id)


class _ModelSend:
    """Picklable replacement for the transport: sends go to the pool."""

    __slots__ = ("world", "node")

    def __init__(self, world, node):
        self.world = world
        self.node = node

    def __call__(self, dst, msg):
        if self.node.alive:
            self.world.pool.append((self.node.node_id, dst, msg))


class _ModelDone:
    """Picklable completion callback recording a request's outcome."""

    __slots__ = ("world", "which")

    def __init__(self, world, which):
        self.world = world
        self.which = which

    def __call__(self, ok, reason):
        self.world.results[self.which] = (ok, reason)


class _ModelWorld:
    """The real engines wired to a message pool instead of a transport.

    The whole world pickles, so the enumerator snapshots states instead
    of replaying prefixes.
    """

    def __init__(self, cfg: ModelConfig):
        from .node import ClusterConfig, NodeRuntime
        from .net import FaultSchedule

        self.cfg = cfg
        nodes_n = max(cfg.directory + (cfg.owner,) + cfg.requesters
                      + cfg.readers + cfg.followers_a + cfg.followers_b) + 1
        # degree high enough that a transfer does not trigger eviction
        ccfg = ClusterConfig(nodes=nodes_n, degree=len(cfg.readers) + 2,
                             pipelines=1, directory=cfg.directory,
                             seed=7, fault=FaultSchedule()).validate()
        self.verifier = Verifier(live=set(range(nodes_n)))
        self.verifier.directory = cfg.directory
        self.pool: List[tuple] = []      # (src, dst, msg)
        self.timers: List[tuple] = []
        self.loop = _ModelLoop(self)
        self.crashes = 0
        self.viewed: Set[int] = set()
        self.crashed: Set[int] = set()
        self.resumed = True
        self.e_id = 0
        oracle = _ModelOracle(self)
        self.nodes = []
        for i in range(nodes_n):
            n = NodeRuntime(i, self.loop, _ModelNet(), ccfg, self.verifier,
                            oracle)
            n.send = _ModelSend(self, n)
            n.rng = _FixedRng()
            self.nodes.append(n)
        self._setup()

    def _setup(self):
        cfg = self.cfg
        from .ownership import OwnRec
        from .txlocal import LVL_OWNER, LVL_READER
        if cfg.scenario == "ownership":
            key = 100
            self.key = key
            readers = tuple(cfg.readers)
            for d in set(cfg.directory) | {cfg.owner}:
                self.nodes[d].own.recs[key] = OwnRec((0, 0), cfg.owner,
                                                     readers)
            self.nodes[cfg.owner].store.seed(key, 0, 42, LVL_OWNER)
            for r in readers:
                self.nodes[r].store.seed(key, 0, 42, LVL_READER)
            self.verifier.prime(key, cfg.owner, readers)
            if cfg.mutant == "val_before_apply":
                for n in self.nodes:
                    n.own.mutate_val_before_apply = True
            self.started: Set[int] = set()
            self.results: Dict[int, tuple] = {}
        else:
            # one coordinator (the owner) with two pipelined write txs on
            # overlapping keys and asymmetric follower sets
            kx, ky = 100, 101
            self.keys = (kx, ky)
            coord = cfg.owner
            for k, fol in ((kx, cfg.followers_a), (ky, cfg.followers_b)):
                for d in set(cfg.directory) | {coord}:
                    self.nodes[d].own.recs[k] = OwnRec((0, 0), coord,
                                                       tuple(fol))
                self.nodes[coord].store.seed(k, 0, 0, LVL_OWNER)
                for r in fol:
                    self.nodes[r].store.seed(k, 0, 0, LVL_READER)
                self.verifier.prime(k, coord, tuple(fol))
            for n in self.nodes:
                if cfg.mutant == "skip_version_check":
                    n.rc.mutate_skip_version_check = True
                elif cfg.mutant == "skip_gating":
                    n.rc.mutate_skip_gating = True
            self.started = set()
            self.results = {}

    # -- actions ---------------------------------------------------------------

    def recovery_done(self, node, e_id):
        if e_id == self.e_id and not self.resumed \
                and len(self.viewed) == len(self.live_nodes()):
            if all(not n.rc.recovery_pending()
                   for n in self.nodes if n.alive):
                self.resumed = True
                for n in self.nodes:
                    if n.alive:
                        n.on_resume(self.e_id)

    def live_nodes(self):
        return [n.node_id for n in self.nodes if n.alive]

    def _work_in_flight(self) -> bool:
        """Crashing a fully quiescent world only exercises pruning; the
        interesting crash points are while something is pending."""
        if self.pool or self.timers:
            return True
        if len(self.started) < (len(self.cfg.requesters)
                                if self.cfg.scenario == "ownership" else 2):
            return True
        for n in self.nodes:
            if not n.alive:
                continue
            if n.own.outst or n.rc.replays:
                return True
            for rec in n.own.recs.values():
                if rec.pend is not None:
                    return True
            for f in n.rc.fstate.values():
                if f.stored or f.deferred:
                    return True
        return False

    def enabled(self) -> List[tuple]:
        acts: List[tuple] = []
        cfg = self.cfg
        if cfg.scenario == "ownership":
            for r in cfg.requesters:
                if r not in self.started and self.nodes[r].alive:
                    acts.append(("start", r))
        else:
            for t in (0, 1):
                if t not in self.started and self.nodes[cfg.owner].alive:
                    acts.append(("start", t))
        for i in range(len(self.pool)):
            acts.append(("deliver", i))
            if cfg.allow_dup:
                acts.append(("dup", i))
        for j in range(len(self.timers)):
            acts.append(("timer", j))
        if self.crashes < cfg.max_crashes and self._work_in_flight():
            for c in cfg.crash_candidates:
                if self.nodes[c].alive:
                    acts.append(("crash", c))
        if self.crashed and len(self.viewed) < len(self.live_nodes()):
            # the membership oracle delivers one view to every live node
            # at a single instant; in-flight messages still interleave
            # freely before and after the sweep
            acts.append(("view",))
        return acts

    def apply(self, act) -> None:
        from .membership import MembershipView
        kind = act[0]
        if kind == "start":
            self.started.add(act[1])
            self._start(act[1])
        elif kind == "deliver" or kind == "dup":
            src, dst, msg = self.pool.pop(act[1])
            node = self.nodes[dst]
            if node.alive:
                node.dispatch(src, msg)
                if kind == "dup" and node.alive:
                    # duplication: the same datagram arrives twice
                    node.dispatch(src, msg)
        elif kind == "timer":
            fn, arg = self.timers.pop(act[1])
            fn(arg)
        elif kind == "crash":
            node = act[1]
            self.crashes += 1
            self.crashed.add(node)
            self.nodes[node].crash()
            self.verifier.on_crash(node)
            self.pool = [e for e in self.pool if e[1] != node]
            self.e_id += 1
            self.viewed = set()
            self.resumed = False
        elif kind == "view":
            view = MembershipView(self.e_id, tuple(self.live_nodes()))
            for node in self.live_nodes():
                self.viewed.add(node)
                self.nodes[node].on_view(view)
            self.recovery_done(self.live_nodes()[0], self.e_id)

    def _start(self, which) -> None:
        cfg = self.cfg
        if cfg.scenario == "ownership":
            from .messages import WANT_OWNER
            self.nodes[which].own.begin(self.key, WANT_OWNER,
                                        _ModelDone(self, which))
        else:
            coord = self.nodes[cfg.owner]
            kx, ky = self.keys
            writes = [(kx, 10 + which)] if which == 0 \
                else [(kx, 20 + which), (ky, 20 + which)]
            store = coord.store
            for k, v in writes:
                nv = store.ver.get(k, 0) + 1
                self.verifier.on_owner_install(coord.node_id, k, nv)
                store.ver[k] = nv
                store.val[k] = v
                store.tst[k] = 2  # TS_WRITE
            coord.rc.start(0, writes)

    # -- snapshot / restore ------------------------------------------------
    #
    # The enumerator restores states into this same world object, so the
    # copies below must cover exactly the containers the engines mutate;
    # messages (OwnMsg, tuples) are immutable once built and are shared.

    def save(self):
        """Capture the current state by reference.

        Safe because ``restore`` always rebuilds fresh copies into the
        engines, so objects reachable from a snapshot are never mutated
        again once the next restore replaces them.
        """
        nodes = []
        for n in self.nodes:
            own, rc, txl, st = n.own, n.rc, n.txl, n.store
            rc_busy = (rc.fstate or rc.replays or rc.owed_racks
                       or any(p.pending or p.next_slot for p in rc.pips))
            nodes.append((
                n.alive, n.e_id, n.live,
                own.recs, own.outst, own.next_rid, own.deferred_replays,
                own.held_reqs, own.recovery_hold,
                (st.val, st.ver, st.tst, st.level, st.condemned),
                None if not rc_busy else (
                    [(p.next_slot, p.pending, p.acked_upto, p.val_next,
                      p.extra_rval) for p in rc.pips],
                    {pk: (f.ok_upto, f.stored, f.deferred)
                     for pk, f in rc.fstate.items()},
                    rc.replays, rc.owed_racks, rc._rack_gen),
                txl.holds if txl.holds else None,
            ))
        vf = self.verifier
        vstate = (vf.live, vf.violations, vf.meta, vf.claims,
                  vf.key_maxver, vf.completed_upto, vf.mint_next,
                  vf.mint_node, vf.mint_suspect)
        return (tuple(nodes), vstate, self.pool, self.timers,
                self.crashes, self.viewed, self.crashed,
                self.resumed, self.e_id, self.started, self.results)

    def restore(self, snap) -> None:
        (nodes, vstate, pool, timers, crashes, viewed, crashed, resumed,
         e_id, started, results) = snap
        for n, s in zip(self.nodes, nodes):
            (alive, ne_id, live, recs, outst, next_rid, defr, held,
             rhold, store, rcs, holds) = s
            n.alive = alive
            n.ep.alive = alive
            n.e_id = ne_id
            n.live = set(live)
            own = n.own
            own.recs = {k: _copy_rec(r) for k, r in recs.items()}
            own.outst = {k: _copy_out(o) for k, o in outst.items()}
            own.next_rid = next_rid
            own.deferred_replays = dict(defr)
            own.held_reqs = list(held)
            own.recovery_hold = rhold
            st = n.store
            st.val, st.ver, st.tst = (dict(store[0]), dict(store[1]),
                                      dict(store[2]))
            st.level = dict(store[3])
            st.condemned = set(store[4])
            rc = n.rc
            if rcs is None:
                for p in rc.pips:
                    p.next_slot = 0
                    p.pending = {}
                    p.acked_upto = {}
                    p.val_next = 0
                    p.extra_rval = {}
                rc.fstate = {}
                rc.replays = {}
                rc.owed_racks = {}
                rc._rack_gen = {}
            else:
                pips, fstate, replays, owed, rgen = rcs
                for p, ps in zip(rc.pips, pips):
                    p.next_slot = ps[0]
                    p.pending = dict(ps[1])
                    p.acked_upto = dict(ps[2])
                    p.val_next = ps[3]
                    p.extra_rval = {sl: set(v) for sl, v in ps[4].items()}
                rc.fstate = {}
                for pk, (ok, stored, deferred) in fstate.items():
                    f = FollowerPipe()
                    f.ok_upto = ok
                    f.stored = dict(stored)
                    f.deferred = dict(deferred)
                    rc.fstate[pk] = f
                rc.replays = {pk: {sl: (u, ne, set(g))
                                   for sl, (u, ne, g) in v.items()}
                              for pk, v in replays.items()}
                rc.owed_racks = {to: set(v) for to, v in owed.items()}
                rc._rack_gen = dict(rgen)
            txl = n.txl
            if holds:
                txl.holds = {}
                for k, (pip, active, pending) in holds.items():
                    h = Hold(pip)
                    h.active = active
                    h.pending = pending
                    txl.holds[k] = h
            elif txl.holds:
                txl.holds = {}
        vf = self.verifier
        (vlive, viol, meta, claims, maxv, comp, mintn, mintnode,
         suspect) = vstate
        vf.live = set(vlive)
        vf.violations = list(viol)
        vf.meta = {k: dict(m) for k, m in meta.items()}
        vf.claims = {k: set(c) for k, c in claims.items()}
        vf.key_maxver = dict(maxv)
        vf.completed_upto = dict(comp)
        vf.mint_next = dict(mintn)
        vf.mint_node = dict(mintnode)
        vf.mint_suspect = set(suspect)
        self.pool = list(pool)
        self.timers = list(timers)
        self.crashes = crashes
        self.viewed = set(viewed)
        self.crashed = set(crashed)
        self.resumed = resumed
        self.e_id = e_id
        self.started = set(started)
        self.results = dict(results)

    def fingerprint(self):
        per_node = []
        for n in self.nodes:
            if not n.alive:
                per_node.append("dead")
                continue
            own, rc, st = n.own, n.rc, n.store
            recs = tuple((k, r.ots, r.owner, r.readers, r.state,
                          r.tombstone, _fp_pend(r.pend),
                          tuple((q.requester, q.request_id, q.e_id)
                                for q in r.queue))
                         for k, r in sorted(own.recs.items()))
            outst = tuple((k, o.request_id, o.desired, o.driver, o.need,
                           tuple(sorted(o.got)), o.ots, o.owner,
                           o.readers, o.data, o.ver, o.attempt,
                           o.surfaced)
                          for k, o in sorted(own.outst.items()))
            store = (tuple(sorted(st.val.items())),
                     tuple(sorted(st.ver.items())),
                     tuple(sorted(st.tst.items())),
                     tuple(sorted(st.level.items())),
                     tuple(sorted(st.condemned)))
            if rc.fstate or rc.replays or rc.owed_racks \
                    or any(p.pending or p.next_slot for p in rc.pips):
                pips = tuple((p.next_slot,
                              tuple(sorted(p.pending.items())),
                              tuple(sorted(p.acked_upto.items())),
                              p.val_next,
                              tuple((s, tuple(sorted(v))) for s, v
                                    in sorted(p.extra_rval.items())))
                             for p in rc.pips)
                fstate = tuple((pk, f.ok_upto,
                                tuple(sorted(f.stored.items())),
                                tuple(sorted(f.deferred.items())))
                               for pk, f in sorted(rc.fstate.items()))
                replays = tuple((pk, tuple((s, u, ne, tuple(sorted(g)))
                                           for s, (u, ne, g)
                                           in sorted(v.items())))
                                for pk, v in sorted(rc.replays.items()))
            else:
                pips = fstate = replays = ()
            holds = tuple((k, h.pipeline, h.active, h.pending)
                          for k, h in sorted(n.txl.holds.items())) \
                if n.txl.holds else ()
            deferred = tuple(sorted(
                (k, _fp_msg(m)) for k, m in own.deferred_replays.items()))
            per_node.append((recs, outst, own.recovery_hold, deferred,
                             tuple(_fp_msg(m) for m in own.held_reqs),
                             store, pips, fstate, replays, holds, n.e_id))
        pool = tuple(sorted(((e[0], e[1], _fp_msg(e[2]))
                             for e in self.pool), key=repr))
        timers = tuple(sorted(((t[0].__qualname__, _fp_msg(t[1]))
                               for t in self.timers), key=repr))
        return (tuple(per_node), pool, timers,
                tuple(sorted(self.started)), self.crashes,
                tuple(sorted(self.viewed)), self.resumed)

    def check_terminal(self) -> Optional[tuple]:
        """At a quiescent leaf every request must be resolved and all
        live metadata holders must agree."""
        cfg = self.cfg
        if cfg.scenario == "ownership":
            for r in cfg.requesters:
                node = self.nodes[r]
                if node.alive and r in self.started \
                        and node.own.outst:
                    return ("deadlock-unresolved-request", r)
            metas = set()
            for d in cfg.directory:
                node = self.nodes[d]
                if not node.alive:
                    continue
                rec = node.own.recs.get(self.key)
                if rec is None or rec.pend is not None:
                    return ("deadlock-staged-arbiter", d)
                metas.add((rec.ots, rec.owner, rec.readers))
            if len(metas) > 1:
                return ("terminal-disagreement", sorted(metas, key=repr))
        else:
            if len(self.started) == 2:
                for n in self.nodes:
                    if not n.alive:
                        continue
                    for f in n.rc.fstate.values():
                        if f.stored or f.deferred:
                            return ("deadlock-unvalidated-follower",
                                    n.node_id)
                    if n.rc.replays:
                        return ("deadlock-replays", n.node_id)
                # live replicas that are valid must agree with the owner
                coord = self.nodes[self.cfg.owner]
                for k in self.keys:
                    top = self.verifier.key_maxver.get(k, 0)
                    for n in self.nodes:
                        if not n.alive:
                            continue
                        if n.store.tst.get(k) == 0 \
                                and n.store.level.get(k) is not None:
                            if n.store.ver.get(k) != top and \
                                    self._key_fully_replicated(k):
                                return ("terminal-stale-replica",
                                        n.node_id, k)
        return None

    def _key_fully_replicated(self, k) -> bool:
        # with the coordinator dead, a slot nobody applied is legally lost
        return self.nodes[self.cfg.owner].alive


def small_model_enumerate(cfg: ModelConfig) -> ModelReport:
    """Exhaustive DFS with state-fingerprint memoization over the real
    engine code.  One template world is restored from a parent snapshot
    for every explored edge; parents snapshot once."""
    report = ModelReport()
    t0 = time.monotonic()
    visited: Set = set()
    world = _ModelWorld(cfg)

    def unwind(p):
        out = []
        while p is not None:
            out.append(p[0])
            p = p[1]
        return tuple(reversed(out))

    stack: List[tuple] = [(world.save(), None, None)]
    check_every = 512
    n_since = 0
    while stack:
        n_since += 1
        if n_since >= check_every:
            n_since = 0
            if time.monotonic() - t0 > cfg.time_budget \
                    or report.states >= cfg.max_states:
                report.complete = False
                break
        snap, act, path = stack.pop()
        world.restore(snap)
        if act is not None:
            world.apply(act)
            path = (act, path)
            if world.verifier.violations:
                report.violations.append(
                    (tuple(world.verifier.violations), unwind(path)))
                if len(report.violations) >= 3:
                    break
                continue
        # 64-bit state fingerprints keep the visited set in memory at
        # million-state scale (hash collisions are vanishingly unlikely)
        fp = hash(world.fingerprint())
        if fp in visited:
            continue
        visited.add(fp)
        report.states += 1
        acts = world.enabled()
        if not acts:
            term = world.check_terminal()
            if term is not None:
                report.deadlocks.append((term, unwind(path)))
                if len(report.deadlocks) >= 3:
                    break
            continue
        report.transitions += len(acts)
        psnap = world.save()
        for a in reversed(acts):
            stack.append((psnap, a, path))
    report.elapsed = time.monotonic() - t0
    return report
