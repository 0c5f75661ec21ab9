"""Desk-scale benchmark workloads and measurement harness.

Four workloads drive the simulated cluster: cellular handovers (large
write-only contexts, locality shifts via mobility), Smallbank (write
intensive, 15% reads), TATP (read intensive, 80/20) and Voter (popularity
skew plus scripted bulk migrations).  Workloads generate deterministic,
pre-routed transaction streams; locality changes relocate the affected
customer so that the requested remote-transaction fraction is what the
run actually performs.

Scale is deliberately desk sized: 10^4..10^5 objects and transactions on
a logical-time simulator.  Absolute throughput numbers from production
hardware are out of scope; throughput here is committed transactions per
logical time unit.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .messages import WANT_OWNER, WANT_OWNER_READER
from .node import ClusterConfig, OP_R, OP_RMW, OP_W, SimCluster, TxDesc

# table ids (object key = table << 48 | row)
HO_USER_CTX, HO_USER_BEARER, HO_BS_CTX, HO_BS_LOAD, HO_ASSOC = 1, 2, 3, 4, 5
SB_ACCOUNT, SB_SAVINGS, SB_CHECKING = 11, 12, 13
TA_SUBSCRIBER, TA_ACCESS, TA_SPECIAL, TA_CALLFWD = 21, 22, 23, 24
VO_CONTESTANT, VO_VOTER, VO_AREA = 31, 32, 33

TABLES = {
    "handovers": (HO_USER_CTX, HO_USER_BEARER, HO_BS_CTX, HO_BS_LOAD,
                  HO_ASSOC),
    "smallbank": (SB_ACCOUNT, SB_SAVINGS, SB_CHECKING),
    "tatp": (TA_SUBSCRIBER, TA_ACCESS, TA_SPECIAL, TA_CALLFWD),
    "voter": (VO_CONTESTANT, VO_VOTER, VO_AREA),
}


def okey(table: int, row: int) -> int:
    return (table << 48) | row


def key_table(key: int) -> int:
    return key >> 48


class Workload:
    name = ""
    payload = 64

    def populate(self, cluster: SimCluster) -> None:
        raise NotImplementedError

    def generate(self, n_txs: int) -> List[Tuple[int, TxDesc]]:
        """Returns a deterministic list of (target_node, descriptor)."""
        raise NotImplementedError


# -- handovers ----------------------------------------------------------------


@dataclass
class Handovers(Workload):
    """Cellular control plane: service/release/handover, all writes.

    A handover is two transactions (start at the old base station's node,
    end at the new one); a remote handover moves the user's objects to
    the new node.  Both halves of a remote handover count as remote
    transactions, matching the ratio arithmetic of the workload analysis
    (5% handovers x 6.2% remote handovers = 0.31% remote transactions).
    """

    nodes: int = 6
    users: int = 6000
    stations: int = 120
    handover_ratio: float = 0.05
    remote_frac: float = 0.062
    mobile_frac: float = 0.2
    seed: int = 1
    payload = 400
    name = "handovers"

    def __post_init__(self):
        self.user_bs: Dict[int, int] = {}
        self.user_home: Dict[int, int] = {}
        self.bs_home: Dict[int, int] = {}

    def populate(self, cluster: SimCluster) -> None:
        rng = random.Random(self.seed * 31 + 7)
        for b in range(self.stations):
            home = b % self.nodes
            self.bs_home[b] = home
            cluster.preload(okey(HO_BS_CTX, b), home, 0, self.payload)
            cluster.preload(okey(HO_BS_LOAD, b), home, 0, 64)
        for u in range(self.users):
            b = rng.randrange(self.stations)
            self.user_bs[u] = b
            home = self.bs_home[b]
            self.user_home[u] = home
            for table in (HO_USER_CTX, HO_USER_BEARER, HO_ASSOC):
                cluster.preload(okey(table, u), home, 0,
                                self.payload if table == HO_USER_CTX
                                else 64)

    def generate(self, n_txs: int) -> List[Tuple[int, TxDesc]]:
        rng = random.Random(self.seed * 104729 + 13)
        out: List[Tuple[int, TxDesc]] = []
        mobile_cut = max(1, int(self.users * self.mobile_frac))
        while len(out) < n_txs:
            if rng.random() < self.handover_ratio:
                u = rng.randrange(mobile_cut)
                remote = rng.random() < self.remote_frac
                old_home = self.user_home[u]
                if remote and self.nodes > 1:
                    new_home = (old_home + 1 + rng.randrange(
                        self.nodes - 1)) % self.nodes
                else:
                    new_home = old_home
                candidates = [b for b in range(self.stations)
                              if self.bs_home[b] == new_home]
                new_bs = candidates[rng.randrange(len(candidates))]
                old_bs = self.user_bs[u]
                start = TxDesc("write", (
                    (OP_W, okey(HO_USER_CTX, u)),
                    (OP_W, okey(HO_ASSOC, u)),
                    (OP_RMW, okey(HO_BS_LOAD, old_bs))),
                    sig=("u", u), kind="handover_start", remote=remote)
                end = TxDesc("write", (
                    (OP_W, okey(HO_USER_CTX, u)),
                    (OP_W, okey(HO_ASSOC, u)),
                    (OP_RMW, okey(HO_BS_LOAD, new_bs))),
                    sig=("u", u), kind="handover_end", remote=remote)
                out.append((old_home, start))
                out.append((new_home, end))
                self.user_bs[u] = new_bs
                self.user_home[u] = new_home
            else:
                u = rng.randrange(self.users)
                b = self.user_bs[u]
                kind = "service" if rng.random() < 0.5 else "release"
                out.append((self.user_home[u], TxDesc("write", (
                    (OP_W, okey(HO_USER_CTX, u)),
                    (OP_W, okey(HO_USER_BEARER, u)),
                    (OP_RMW, okey(HO_BS_LOAD, b))),
                    sig=("u", u), kind=kind)))
        return out[:n_txs]


# -- smallbank ----------------------------------------------------------------


@dataclass
class Smallbank(Workload):
    """Write-intensive banking mix: 15% reads; of the writes, 30% modify
    two objects and the rest three or more."""

    nodes: int = 3
    customers: int = 9000
    remote_frac: float = 0.007      # fraction of *write* transactions
    hot_frac: float = 0.04
    hot_prob: float = 0.9
    seed: int = 2
    name = "smallbank"

    MIX = (("balance", 0.15), ("deposit_checking", 0.15),
           ("transact_savings", 0.105), ("write_check", 0.255),
           ("amalgamate", 0.17), ("send_payment", 0.17))

    def __post_init__(self):
        self.home: Dict[int, int] = {}

    def populate(self, cluster: SimCluster) -> None:
        for c in range(self.customers):
            home = c % self.nodes
            self.home[c] = home
            for table in (SB_ACCOUNT, SB_SAVINGS, SB_CHECKING):
                cluster.preload(okey(table, c), home, 100, self.payload)

    def _pick(self, rng, node: Optional[int] = None) -> int:
        per = self.customers // self.nodes
        if node is None:
            node = rng.randrange(self.nodes)
        hot = max(1, int(per * self.hot_frac))
        slot = rng.randrange(hot) if rng.random() < self.hot_prob \
            else rng.randrange(per)
        return slot * self.nodes + node

    def generate(self, n_txs: int) -> List[Tuple[int, TxDesc]]:
        rng = random.Random(self.seed * 7919 + 3)
        names = [m[0] for m in self.MIX]
        weights = [m[1] for m in self.MIX]
        out = []
        for _ in range(n_txs):
            kind = rng.choices(names, weights)[0]
            c1 = self._pick(rng)
            home = self.home[c1]
            remote = False
            if kind == "balance":
                ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                       (OP_R, okey(SB_SAVINGS, c1)),
                       (OP_R, okey(SB_CHECKING, c1)))
                out.append((home, TxDesc("ro", ops, sig=("c", c1),
                                         kind=kind)))
                continue
            remote = rng.random() < self.remote_frac and self.nodes > 1
            if kind in ("amalgamate", "send_payment"):
                if remote:
                    c2 = self._pick(rng, (home + 1 + rng.randrange(
                        self.nodes - 1)) % self.nodes)
                    self.home[c2] = home   # pair becomes colocated
                else:
                    c2 = self._pick(rng, self.home[c1])
                    if c2 == c1:
                        c2 = (c1 + self.nodes) % self.customers
                if kind == "amalgamate":
                    ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                           (OP_RMW, okey(SB_SAVINGS, c1)),
                           (OP_RMW, okey(SB_CHECKING, c1)),
                           (OP_RMW, okey(SB_CHECKING, c2)))
                else:
                    ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                           (OP_R, okey(SB_ACCOUNT, c2)),
                           (OP_RMW, okey(SB_CHECKING, c1)),
                           (OP_RMW, okey(SB_CHECKING, c2)))
            else:
                if remote:
                    new_home = (home + 1 + rng.randrange(
                        self.nodes - 1)) % self.nodes
                    self.home[c1] = new_home
                    home = new_home
                if kind == "deposit_checking":
                    ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                           (OP_RMW, okey(SB_CHECKING, c1)))
                elif kind == "transact_savings":
                    ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                           (OP_RMW, okey(SB_SAVINGS, c1)))
                else:  # write_check
                    ops = ((OP_R, okey(SB_ACCOUNT, c1)),
                           (OP_R, okey(SB_SAVINGS, c1)),
                           (OP_RMW, okey(SB_CHECKING, c1)))
            out.append((home, TxDesc("write", ops, sig=("c", c1),
                                     kind=kind, remote=remote)))
        return out


# -- TATP ----------------------------------------------------------------------


@dataclass
class Tatp(Workload):
    """Telecom subscriber database: 80% reads over 4 tables, 7 tx kinds."""

    nodes: int = 3
    subscribers: int = 12000
    remote_frac: float = 0.0        # fraction of *write* transactions
    seed: int = 3
    name = "tatp"

    MIX = (("get_subscriber_data", 0.35), ("get_new_destination", 0.10),
           ("get_access_data", 0.35), ("update_subscriber_data", 0.02),
           ("update_location", 0.14), ("insert_call_forwarding", 0.02),
           ("delete_call_forwarding", 0.02))

    def __post_init__(self):
        self.home: Dict[int, int] = {}

    def populate(self, cluster: SimCluster) -> None:
        for s in range(self.subscribers):
            home = s % self.nodes
            self.home[s] = home
            for table in (TA_SUBSCRIBER, TA_ACCESS, TA_SPECIAL,
                          TA_CALLFWD):
                cluster.preload(okey(table, s), home, 1, self.payload)

    def generate(self, n_txs: int) -> List[Tuple[int, TxDesc]]:
        rng = random.Random(self.seed * 6151 + 11)
        names = [m[0] for m in self.MIX]
        weights = [m[1] for m in self.MIX]
        out = []
        for _ in range(n_txs):
            kind = rng.choices(names, weights)[0]
            s = rng.randrange(self.subscribers)
            home = self.home[s]
            if kind == "get_subscriber_data":
                ops = ((OP_R, okey(TA_SUBSCRIBER, s)),)
            elif kind == "get_new_destination":
                ops = ((OP_R, okey(TA_SPECIAL, s)),
                       (OP_R, okey(TA_CALLFWD, s)))
            elif kind == "get_access_data":
                ops = ((OP_R, okey(TA_ACCESS, s)),)
            else:
                remote = rng.random() < self.remote_frac and self.nodes > 1
                if remote:
                    home = (home + 1 + rng.randrange(self.nodes - 1)) \
                        % self.nodes
                    self.home[s] = home
                if kind == "update_subscriber_data":
                    ops = ((OP_RMW, okey(TA_SUBSCRIBER, s)),
                           (OP_RMW, okey(TA_SPECIAL, s)))
                elif kind == "update_location":
                    ops = ((OP_RMW, okey(TA_SUBSCRIBER, s)),)
                elif kind == "insert_call_forwarding":
                    ops = ((OP_R, okey(TA_SUBSCRIBER, s)),
                           (OP_W, okey(TA_CALLFWD, s)))
                else:  # delete_call_forwarding
                    ops = ((OP_R, okey(TA_SUBSCRIBER, s)),
                           (OP_W, okey(TA_CALLFWD, s)))
                out.append((home, TxDesc("write", ops, sig=("s", s),
                                         kind=kind, remote=remote)))
                continue
            out.append((home, TxDesc("ro", ops, sig=("s", s), kind=kind)))
        return out


# -- voter -----------------------------------------------------------------------


@dataclass
class Voter(Workload):
    """Phone voting: every vote updates a contestant total and the
    voter's history; one hot contestant concentrates the load."""

    nodes: int = 3
    contestants: int = 20
    voters: int = 30000
    hot_share: float = 0.12
    seed: int = 4
    name = "voter"

    def __post_init__(self):
        self.contestant_home: Dict[int, int] = {}
        self.voter_of: Dict[int, int] = {}

    def populate(self, cluster: SimCluster) -> None:
        rng = random.Random(self.seed * 131 + 17)
        for c in range(self.contestants):
            home = c % self.nodes
            self.contestant_home[c] = home
            cluster.preload(okey(VO_CONTESTANT, c), home, 0, self.payload)
        for a in range(self.nodes):
            cluster.preload(okey(VO_AREA, a), a % self.nodes, 0, 64)
        for v in range(self.voters):
            if rng.random() < self.hot_share:
                c = 0
            else:
                c = 1 + rng.randrange(self.contestants - 1)
            self.voter_of[v] = c
            cluster.preload(okey(VO_VOTER, v), self.contestant_home[c], 0,
                            self.payload)

    def generate(self, n_txs: int) -> List[Tuple[int, TxDesc]]:
        rng = random.Random(self.seed * 524287 + 19)
        out = []
        for _ in range(n_txs):
            v = rng.randrange(self.voters)
            c = self.voter_of[v]
            ops = ((OP_RMW, okey(VO_CONTESTANT, c)),
                   (OP_W, okey(VO_VOTER, v)))
            out.append((self.contestant_home[c],
                        TxDesc("write", ops, sig=("v", v), kind="vote")))
        return out

    def migration_keys(self, count: int) -> List[int]:
        return [okey(VO_VOTER, v) for v in range(min(count, self.voters))]


# -- migration driver -------------------------------------------------------------


class MigrationDriver:
    """Moves a key set to a destination node, a window at a time, off the
    transaction pipelines."""

    def __init__(self, cluster: SimCluster, dest: int, keys: List[int],
                 window: int = 8):
        self.cluster = cluster
        self.dest = dest
        self.keys = list(keys)
        self.window = window
        self.next = 0
        self.inflight = 0
        self.done = 0
        self.t_start = None
        self.t_done = None

    def start(self, at: int) -> None:
        self.cluster.loop.at(at, self._kick, None)

    def _kick(self, _arg) -> None:
        if self.t_start is None:
            self.t_start = self.cluster.loop.now
        self._fill()

    def _fill(self) -> None:
        node = self.cluster.nodes[self.dest]
        while self.inflight < self.window and self.next < len(self.keys):
            key = self.keys[self.next]
            self.next += 1
            lvl = node.store.level.get(key)
            desired = WANT_OWNER_READER if lvl == 1 else WANT_OWNER
            if lvl == 2:
                self.done += 1
                continue
            self.inflight += 1
            node.own.begin(key, desired, self._one_done)
        if self.inflight == 0 and self.next >= len(self.keys) \
                and self.t_done is None:
            self.t_done = self.cluster.loop.now

    def _one_done(self, ok: bool, _reason: int) -> None:
        self.inflight -= 1
        if ok:
            self.done += 1
        self._fill()

    def finished(self) -> bool:
        return self.t_done is not None


# -- harness ------------------------------------------------------------------------


def build_cluster(wl: Workload, seed: int, nodes: int,
                  fault=None, **cfg_kw) -> SimCluster:
    from .net import FaultSchedule
    cfg = ClusterConfig(nodes=nodes, seed=seed,
                        fault=fault or FaultSchedule(seed=seed),
                        payload_size=wl.payload, **cfg_kw)
    cluster = SimCluster(cfg)
    wl.populate(cluster)
    return cluster


def run_workload(wl: Workload, n_txs: int, seed: int = 0,
                 nodes: Optional[int] = None, fault=None,
                 track_windows: int = 0, migration=None,
                 record_history: bool = False, **cfg_kw) -> dict:
    """Run one workload to quiescence and summarize.

    ``migration`` is (time, keys, dest) for a scripted bulk ownership
    move; ``track_windows`` > 0 records committed-per-window timelines.
    """
    nodes = nodes if nodes is not None else wl.nodes
    cluster = build_cluster(wl, seed, nodes, fault,
                            record_history=record_history, **cfg_kw)
    stream = wl.generate(n_txs)
    remote_planned = sum(1 for _n, d in stream if d.remote)
    for target, desc in stream:
        cluster.balancer.assign(desc.sig, target)
        cluster.enqueue(target, desc)
    if track_windows:
        cluster._track_times = True
    driver = None
    if migration is not None:
        at, keys, dest = migration
        driver = MigrationDriver(cluster, dest, keys)
        driver.start(at)
    cluster.start_runners()
    cluster.run_to_quiescence()
    violations = cluster.final_check()
    stats = cluster.stats()
    lat = sorted(x for n in cluster.nodes for x in n.own.stats_latency)

    def pct(p: float):
        if not lat:
            return None
        return lat[min(len(lat) - 1, int(p * len(lat)))]

    res = {
        "workload": wl.name,
        "nodes": nodes,
        "seed": seed,
        "txs_requested": n_txs,
        **stats,
        "throughput": stats["committed"] / max(1, stats["time"]),
        "remote_planned_frac": remote_planned / max(1, n_txs),
        "violations": violations,
        "ownership_latency": {
            "n": len(lat),
            "mean": sum(lat) / len(lat) if lat else None,
            "p50": pct(0.50), "p99": pct(0.99), "p999": pct(0.999),
        },
        "msgs_per_tx": stats["packets"] / max(1, stats["committed"]),
    }
    if track_windows:
        windows: Dict[int, int] = {}
        for t in cluster.commit_times:
            windows[t // track_windows] = windows.get(t // track_windows,
                                                      0) + 1
        res["windows"] = sorted(windows.items())
    if migration is not None:
        res["migration"] = {
            "moved": driver.done,
            "started_at": driver.t_start,
            "finished_at": driver.t_done,
        }
    if record_history:
        res["history"] = cluster.history
        res["completed_upto"] = dict(cluster.verifier.completed_upto)
    return res


def locality_sweep(make_wl, fractions: Iterable[float], n_txs: int,
                   seed: int = 0, nodes: int = 3) -> List[dict]:
    """Throughput versus remote-write-transaction fraction."""
    out = []
    for f in fractions:
        wl = make_wl(f)
        res = run_workload(wl, n_txs, seed=seed, nodes=nodes)
        res["remote_frac"] = f
        out.append(res)
    return out
