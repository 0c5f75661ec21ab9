"""Node runtime and cluster composition.

A :class:`NodeRuntime` wires one node's store, protocol engines and
transport endpoint behind a serial message dispatcher.  The
:class:`SimCluster` builds a whole deployment over the discrete event
loop: membership oracle, fault injection, application-level load
balancer, per-pipeline transaction runners and the shared invariant
verifier.  The same runtime drives the socket backend (see
:mod:`zeus.socknode`).
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Set, Tuple

from .checker import Verifier
from .membership import MembershipOracle, MembershipView
from .messages import (K_ACK, K_INV, K_NACK, K_REQ, K_RESP, K_RINV, K_RACK,
                       K_RVAL, K_VAL, WANT_OWNER, WANT_OWNER_READER)
from .net import EventLoop, FaultSchedule, ReliableEndpoint, SimNet
from .ownership import OwnershipEngine, OwnRec
from .rcommit import CommitEngine, TS_VALID
from .txlocal import (LVL_OWNER, LVL_READER, Store, TxConflict, TxGone,
                      TxLayer, TxNotReplica, TxStall)

MAX_PIPELINES = 16


@dataclass(frozen=True)
class ClusterConfig:
    nodes: int = 3
    degree: int = 3
    pipelines: int = 2
    directory: Tuple[int, ...] = (0, 1, 2)
    lease: int = 50
    latency: int = 1
    seed: int = 0
    payload_size: int = 64
    fault: FaultSchedule = field(default_factory=FaultSchedule)
    record_history: bool = False
    hash_trace: bool = False
    blocking_commit: bool = False    # disable pipelining (for comparison)
    tx_cost: int = 1                 # logical time per transaction

    def validate(self) -> "ClusterConfig":
        if self.nodes < 1:
            raise ValueError("need at least one node")
        if len(set(self.directory)) != len(self.directory):
            raise ValueError("node id collision in directory list")
        if any(d >= self.nodes or d < 0 for d in self.directory):
            raise ValueError("directory node outside deployment")
        if not (1 <= self.pipelines <= MAX_PIPELINES):
            raise ValueError("pipelines per node must be in 1..%d"
                             % MAX_PIPELINES)
        if self.degree < 1:
            raise ValueError("replication degree must be positive")
        return self


def default_directory(nodes: int) -> Tuple[int, ...]:
    return tuple(range(min(3, nodes)))


class NodeRuntime:
    """One node: store, engines, endpoint and the serial dispatcher."""

    def __init__(self, node_id: int, loop, net, config: ClusterConfig,
                 verifier, oracle, trace=None):
        self.node_id = node_id
        self.loop = loop
        self.config = config
        self.verifier = verifier
        self.oracle = oracle
        self.trace = trace
        self.alive = True
        self.e_id = 0
        self.live: Set[int] = set(range(config.nodes))
        self.directory = (config.directory
                          or default_directory(config.nodes))
        self.degree = config.degree
        self.rng = random.Random((config.seed * 2654435761 + node_id)
                                 & 0xFFFFFFFF)
        self.store = Store()
        self.txl = TxLayer(self)
        self.own = OwnershipEngine(self)
        self.rc = CommitEngine(self, config.pipelines)
        self.ep = ReliableEndpoint(node_id, net, loop, self.dispatch)
        self.send = self.ep.send  # shortcut past the wrapper
        net.attach(node_id, self.ep)
        self.tx_waiters: Dict[Tuple[int, int], Callable] = {}
        rc, own = self.rc, self.own
        self._handlers = [None] * 10
        self._handlers[K_REQ] = own.on_req
        self._handlers[K_INV] = own.on_inv
        self._handlers[K_ACK] = own.on_ack
        self._handlers[K_NACK] = own.on_nack
        self._handlers[K_RESP] = own.on_resp
        self._handlers[K_VAL] = own.on_val
        self._handlers[K_RINV] = rc.on_rinv
        self._handlers[K_RACK] = rc.on_rack
        self._handlers[K_RVAL] = rc.on_rval

    def now(self) -> int:
        return self.loop.now

    def dispatch(self, src: int, msg) -> None:
        # the endpoint already drops traffic for a crashed node
        self._handlers[msg[0]](src, msg)

    # hooks used by the engines
    def busy_for_transfer(self, key: int) -> bool:
        return self.txl.busy(key)

    def on_slot_validated(self, keys) -> None:
        self.txl.on_slot_validated(keys)

    def on_tx_validated(self, pip: int, slot: int) -> None:
        cb = self.tx_waiters.pop((pip, slot), None)
        if cb is not None:
            cb()

    def check_recovery_done(self) -> None:
        if not self.rc.recovery_pending():
            self.oracle.recovery_done(self.node_id, self.e_id)

    def crash(self) -> None:
        self.alive = False
        self.ep.alive = False

    def on_view(self, view: MembershipView) -> None:
        if not self.alive or view.e_id <= self.e_id:
            return
        dead = self.live - set(view.live)
        self.e_id = view.e_id
        self.live = set(view.live)
        for d in dead:
            self.ep.forget_peer(d)
        if self.trace is not None:
            self.trace(("view", self.node_id, view.e_id, view.live))
        self.rc.on_view(self.live, dead)
        self.own.on_view(self.live, dead)
        self.rc.replay_all()
        self.check_recovery_done()

    def on_resume(self, e_id: int) -> None:
        if self.alive and e_id == self.e_id:
            self.own.on_resume()

    def object_record(self, key: int):
        """External view of one replica (t_state, t_version, level)."""
        store = self.store
        lvl = store.level.get(key)
        return {
            "t_state": store.tst.get(key),
            "t_version": store.ver.get(key),
            "level": {LVL_OWNER: "owner", LVL_READER: "reader",
                      None: "non-replica"}[lvl],
        }


class LoadBalancer:
    """Application-level router: same key signature, same node.

    The assignment map is the replicated key-value store of the balancer
    tier; the simulator keeps it as harness state updated only here.
    """

    def __init__(self, cluster, seed: int):
        self.cluster = cluster
        self.rng = random.Random(seed ^ 0xB5297A4D)
        self.map: Dict[object, int] = {}

    def route(self, sig) -> int:
        live = self.cluster.live_nodes()
        node = self.map.get(sig)
        if node is not None and node in live:
            return node
        node = live[self.rng.randrange(len(live))]
        self.map[sig] = node
        return node

    def assign(self, sig, node: int) -> None:
        self.map[sig] = node


# Transaction descriptor op codes
OP_R = 0      # read
OP_W = 1      # blind write (driver assigns a fresh unique value)
OP_RMW = 2    # read-modify-write (value + 1)


@dataclass
class TxDesc:
    mode: str                 # "write" | "ro"
    ops: Tuple[Tuple[int, int], ...]   # (opcode, key)
    sig: object = None        # routing signature
    kind: str = ""            # workload transaction name
    remote: bool = False      # workload expects an ownership move
    hops: int = 0             # read-only routing attempts so far


class PipelineRunner:
    """Closed-loop driver for one pipeline: one transaction at a time,
    pipelined with replication unless the cluster runs in blocking mode."""

    RETRY_CAP = 12

    def __init__(self, cluster, node: NodeRuntime, pid: int):
        self.cluster = cluster
        self.node = node
        self.pid = pid
        self.queue: deque = deque()
        self.ctx = None
        self.desc: Optional[TxDesc] = None
        self.op_idx = 0
        self.retries = 0
        self.ro_retries = 0
        self.idle = True
        self.stalled = False

    def kick(self) -> None:
        if self.idle and not self.stalled:
            self.idle = False
            self.cluster.loop.after(0, self.step)

    def step(self, _arg=None) -> None:
        node = self.node
        if not node.alive:
            return
        txl = node.txl
        if self.ctx is None:
            if not self.queue:
                self.idle = True
                self.cluster.note_idle()
                return
            self.desc = self.queue.popleft()
            self.op_idx = 0
            if self.desc.mode == "ro":
                self.ctx = txl.tr_r_create()
            else:
                self.ctx = txl.tr_create(self.pid)
        try:
            self._run_ops()
        except TxStall as s:
            self.stalled = True
            self.cluster.stat_stalls += 1
            node.own.begin(s.key, s.desired, self._ownership_done)
            return
        except TxConflict:
            self._abort_retry()
            return
        except TxNotReplica as e:
            txl.tr_abort(self.ctx)
            self.ctx = None
            self.cluster.reroute_ro(self.desc, e.key)
            self.desc = None
            self.cluster.loop.after(self.cluster.config.tx_cost, self.step)
            return
        self._commit()

    def _run_ops(self) -> None:
        txl = self.node.txl
        ctx = self.ctx
        ops = self.desc.ops
        n = len(ops)
        while self.op_idx < n:
            op, key = ops[self.op_idx]
            if op == OP_R:
                txl.tr_open_read(ctx, key)
            elif op == OP_W:
                txl.tr_open_write(ctx, key)
                txl.tr_write(ctx, key, self.cluster.next_value())
            else:
                cur = txl.tr_open_write(ctx, key)
                txl.tr_write(ctx, key, (cur or 0) + 1)
            self.op_idx += 1

    def _ownership_done(self, ok: bool, reason: int) -> None:
        node = self.node
        if not node.alive or self.ctx is None:
            self.stalled = False
            return
        self.stalled = False
        if ok:
            self.cluster.loop.after(0, self.step)
        elif reason == 3:  # key destroyed
            node.txl.tr_abort(self.ctx)
            self.ctx = None
            self.desc = None
            self.cluster.stat_dropped += 1
            self.cluster.loop.after(self.cluster.config.tx_cost, self.step)
        else:
            self._abort_retry()

    def _abort_retry(self) -> None:
        node = self.node
        node.txl.tr_abort(self.ctx)
        self.ctx = None
        self.retries += 1
        cost = self.cluster.config.tx_cost
        if self.desc.mode == "ro" and self.ro_retries < 3:
            self.ro_retries += 1
            self.queue.appendleft(self.desc)
            self.desc = None
            self.cluster.loop.after(cost, self.step)
            return
        if self.retries > self.RETRY_CAP:
            self.cluster.stat_dropped += 1
            self.retries = 0
            self.desc = None
            self.cluster.loop.after(cost, self.step)
            return
        backoff = min(2 ** self.retries, 64)
        backoff += self.node.rng.randrange(1 + (backoff >> 1))
        self.queue.appendleft(self.desc)
        self.desc = None
        self.cluster.loop.after(backoff, self.step)

    def _commit(self) -> None:
        cluster = self.cluster
        node = self.node
        try:
            txid = node.txl.tr_commit(self.ctx)
        except TxConflict:
            self._abort_retry()
            return
        cluster.note_commit(node.node_id, self.desc, self.ctx)
        self.retries = 0
        self.ro_retries = 0
        ctx = self.ctx
        self.ctx = None
        self.desc = None
        cost = cluster.config.tx_cost
        if cluster.config.blocking_commit and txid is not None:
            # non-pipelined variant: wait for the R-VAL broadcast
            node.tx_waiters[(txid[1], txid[2])] = self._unblock
            return
        cluster.loop.after(cost, self.step)

    def _unblock(self) -> None:
        self.cluster.loop.after(self.cluster.config.tx_cost, self.step)


class SimCluster:
    """A whole simulated deployment under one event loop."""

    def __init__(self, config: ClusterConfig):
        config = config.validate()
        if not config.directory:
            config = replace(config, directory=default_directory(
                config.nodes))
        self.config = config
        self.loop = EventLoop()
        self.verifier = Verifier(live=set(range(config.nodes)))
        self.net = SimNet(self.loop, config.nodes, config.fault,
                          config.latency)
        self._trace_hash = hashlib.sha256() if config.hash_trace else None
        self._trace_file = None
        self.trace_cb = self._trace if (config.hash_trace) else None
        self.oracle = MembershipOracle(self.loop, config.nodes,
                                       config.lease, self._deliver_view)
        self.oracle.on_resume = self._resume
        self.nodes: List[NodeRuntime] = [
            NodeRuntime(i, self.loop, self.net, config, self.verifier,
                        self.oracle, self.trace_cb)
            for i in range(config.nodes)
        ]
        self.balancer = LoadBalancer(self, config.seed)
        self.runners = [PipelineRunner(self, n, p)
                        for n in self.nodes
                        for p in range(config.pipelines)]
        self._runner_of = {(r.node.node_id, r.pid): r for r in self.runners}
        self._val_counter = 0
        self.committed = 0
        self.committed_ro = 0
        self.stat_stalls = 0
        self.stat_dropped = 0
        self.stat_remote_seen = 0
        self.history: List[dict] = []
        self.commit_times: List[int] = []
        self._track_times = False
        self.home: Dict[int, int] = {}
        for node, t in config.fault.crashes:
            self.loop.at(t, self._crash, node)

    # -- plumbing -------------------------------------------------------------

    def _trace(self, rec) -> None:
        if self._trace_hash is not None:
            self._trace_hash.update(repr(rec).encode())
        if self._trace_file is not None:
            self._trace_file.write(json.dumps(rec, default=list) + "\n")

    def trace_to_file(self, fh) -> None:
        self._trace_file = fh
        self.trace_cb = self._trace
        for n in self.nodes:
            n.trace = self._trace

    def trace_hash(self) -> str:
        return self._trace_hash.hexdigest() if self._trace_hash else ""

    def live_nodes(self) -> List[int]:
        return sorted(self.oracle.live)

    def _deliver_view(self, node: int, view: MembershipView) -> None:
        self.nodes[node].on_view(view)

    def _resume(self, e_id: int) -> None:
        for n in self.nodes:
            n.on_resume(e_id)

    def _crash(self, node: int) -> None:
        self.net.crash(node)
        self.nodes[node].crash()
        self.verifier.on_crash(node)
        if self.trace_cb is not None:
            self.trace_cb(("crash", node, self.loop.now))
        self.oracle.report_failure(node)

    def next_value(self) -> int:
        self._val_counter += 1
        return self._val_counter

    def note_idle(self) -> None:
        pass

    def note_commit(self, node_id: int, desc: TxDesc, ctx) -> None:
        if desc.mode == "ro":
            self.committed_ro += 1
        self.committed += 1
        if self._track_times:
            self.commit_times.append(self.loop.now)
        if self.config.record_history:
            ev = {
                "mode": desc.mode,
                "node": node_id,
                "kind": desc.kind,
                "invoke": ctx.t_invoke,
                "commit": self.loop.now,
                "reads": list(ctx.read_set) if desc.mode == "write"
                         else [(k, v) for k, v, _d in ctx.ro_buf],
                "writes": [(k, self.nodes[node_id].store.ver[k])
                           for k in ctx.write_set]
                          if desc.mode == "write" else [],
            }
            self.history.append(ev)

    def reroute_ro(self, desc: TxDesc, missing_key: int) -> None:
        """A read-only transaction hit a non-replica: send it to the
        missing key's owner.  A key set whose replicas no longer overlap
        anywhere cannot run as a local read-only transaction at all; such
        transactions surface as routing errors after a few attempts."""
        desc.hops += 1
        if desc.hops > 4:
            self.stat_dropped += 1
            return
        owner = self.owner_of(missing_key)
        target = owner if owner is not None else self.live_nodes()[0]
        self.enqueue(target, desc)

    def owner_of(self, key: int) -> Optional[int]:
        for d in self.config.directory:
            node = self.nodes[d]
            if node.alive:
                rec = node.own.recs.get(key)
                if rec is not None:
                    return rec.owner
        return None

    # -- data placement -------------------------------------------------------

    def preload(self, key: int, owner: int, value=0, size: int = 0,
                readers: Optional[Tuple[int, ...]] = None) -> None:
        """Bootstrap one object before the run (no protocol traffic)."""
        cfg = self.config
        if readers is None:
            readers = []
            i = 1
            while len(readers) < cfg.degree - 1 and i < cfg.nodes:
                readers.append((owner + i) % cfg.nodes)
                i += 1
            readers = tuple(readers)
        for d in set(cfg.directory) | {owner}:
            rec = OwnRec((0, 0), owner, tuple(readers))
            self.nodes[d].own.recs[key] = rec
        self.nodes[owner].store.seed(key, 0, value, LVL_OWNER)
        for r in readers:
            self.nodes[r].store.seed(key, 0, value, LVL_READER)
        self.verifier.prime(key, owner, tuple(readers))
        self.home[key] = owner

    def enqueue(self, node_id: int, desc: TxDesc) -> None:
        runners = [self._runner_of[(node_id, p)]
                   for p in range(self.config.pipelines)]
        best = min(runners, key=lambda r: len(r.queue))
        best.queue.append(desc)
        best.kick()

    def enqueue_on_pipeline(self, node_id: int, pid: int,
                            desc: TxDesc) -> None:
        r = self._runner_of[(node_id, pid)]
        r.queue.append(desc)
        r.kick()

    def submit(self, desc: TxDesc) -> None:
        if desc.mode == "ro":
            # read-only transactions run on any replica
            keys = [k for _op, k in desc.ops]
            home = self.home.get(keys[0])
            if home is None:
                home = self.balancer.route(desc.sig)
            replicas = self.replica_nodes(keys)
            if replicas:
                node = replicas[
                    self.balancer.rng.randrange(len(replicas))]
            else:
                node = home
            self.enqueue(node, desc)
            return
        self.enqueue(self.balancer.route(desc.sig), desc)

    def replica_nodes(self, keys) -> List[int]:
        """Nodes believed to hold every key (bootstrap placement based)."""
        live = set(self.live_nodes())
        common: Optional[Set[int]] = None
        cfg = self.config
        for k in keys:
            home = self.home.get(k)
            if home is None:
                return []
            group = {home}
            i = 1
            while len(group) < cfg.degree and i < cfg.nodes:
                group.add((home + i) % cfg.nodes)
                i += 1
            common = group if common is None else (common & group)
        return sorted((common or set()) & live)

    # -- running ---------------------------------------------------------------

    def start_runners(self) -> None:
        for r in self.runners:
            r.kick()

    def run(self, until: Optional[int] = None,
            max_events: int = 200_000_000) -> None:
        self.loop.run(until=until, max_events=max_events)

    def run_to_quiescence(self, max_events: int = 200_000_000) -> None:
        self.loop.run(max_events=max_events)

    def final_check(self) -> List[tuple]:
        self.verifier.final_sweep(self)
        return self.verifier.violations

    def stats(self) -> dict:
        return {
            "committed": self.committed,
            "committed_ro": self.committed_ro,
            "aborts": sum(n.txl.stats_aborts for n in self.nodes),
            "dropped": self.stat_dropped,
            "stalls": self.stat_stalls,
            "packets": self.net.packets_sent,
            "time": self.loop.now,
            "ownership_requests": sum(n.own.stats_requests
                                      for n in self.nodes),
            "ownership_nacks": sum(n.own.stats_nacks for n in self.nodes),
        }
