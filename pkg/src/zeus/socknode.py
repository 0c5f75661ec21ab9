"""Socket backend: one node runtime over UDP datagrams.

The same :class:`~zeus.node.NodeRuntime` runs behind a
:class:`~zeus.net.SocketNet`; a single handler thread per node drains the
datagram inbox, fires due timers and executes client transactions, which
keeps the serial-handler model of the simulated backend.  Wire bytes are
the canonical encoding shared with the simulator.

Membership stays an in-process oracle: the socket backend targets
single-host deployments (tests, demos), not production clusters.
"""

from __future__ import annotations

import threading
import time
from typing import Dict, List, Optional, Tuple

from .checker import Verifier
from .net import SocketNet, ThreadedLoop, decode_datagram
from .node import ClusterConfig, NodeRuntime, OP_R, OP_RMW, OP_W, TxDesc
from .txlocal import TxConflict, TxNotReplica, TxStall


class _Oracle:
    def recovery_done(self, node, e_id):
        pass


class SocketNode:
    """One datastore node listening on a UDP address."""

    def __init__(self, node_id: int, addresses: Dict[int, Tuple[str, int]],
                 config: ClusterConfig):
        self.node_id = node_id
        self.loop = ThreadedLoop()
        self.net = SocketNet(node_id, addresses)
        self.verifier = Verifier(live=set(range(config.nodes)))
        self.verifier.directory = tuple(config.directory)
        self.rt = NodeRuntime(node_id, self.loop, self.net, config,
                              self.verifier, _Oracle())
        self._requests: List[tuple] = []
        self._lock = threading.Lock()
        self._stop = False
        self._thread = threading.Thread(target=self._main, daemon=True)
        self._counter = 0

    def start(self) -> None:
        self.net.start()
        self._thread.start()

    def stop(self) -> None:
        self._stop = True
        self._thread.join(timeout=2.0)
        self.net.close()

    # -- client surface (thread safe) ---------------------------------------

    def execute(self, desc: TxDesc, timeout: float = 5.0):
        """Run one transaction on this node; blocks the calling thread."""
        done = threading.Event()
        box: dict = {}
        with self._lock:
            self._requests.append((desc, done, box))
        if not done.wait(timeout):
            return {"status": "timeout"}
        return box

    # -- node thread ----------------------------------------------------------

    def _main(self) -> None:
        pending: List[tuple] = []
        while not self._stop:
            for src, buf in self.net.drain():
                if src >= 0:
                    self.rt.ep.on_packet(decode_datagram(buf, src))
            self.loop.run_due()
            with self._lock:
                if self._requests:
                    pending.extend(self._requests)
                    self._requests = []
            still: List[tuple] = []
            for item in pending:
                if not self._try_tx(*item):
                    still.append(item)
            pending = still
            time.sleep(0.0005)

    def _try_tx(self, desc: TxDesc, done: threading.Event,
                box: dict) -> bool:
        rt = self.rt
        txl = rt.txl
        ctx = txl.tr_r_create() if desc.mode == "ro" else txl.tr_create(0)
        try:
            reads = []
            for op, key in desc.ops:
                if op == OP_R:
                    reads.append((key, txl.tr_open_read(ctx, key)))
                elif op == OP_W:
                    txl.tr_open_write(ctx, key)
                    self._counter += 1
                    txl.tr_write(ctx, key, self._counter)
                else:
                    cur = txl.tr_open_write(ctx, key)
                    txl.tr_write(ctx, key, (cur or 0) + 1)
            txid = txl.tr_commit(ctx)
        except TxStall as s:
            txl.tr_abort(ctx)
            rt.own.begin(s.key, s.desired, lambda ok, r: None)
            return False  # retried on a later poll pass
        except TxConflict:
            txl.tr_abort(ctx)
            return False
        except TxNotReplica as e:
            box.update({"status": "not-replica", "key": e.key})
            done.set()
            return True
        box.update({"status": "committed", "txid": txid, "reads": reads})
        done.set()
        return True


def start_cluster(config: ClusterConfig, base_port: int = 0
                  ) -> List[SocketNode]:
    """Spin up all nodes of a single-host deployment (tests, demos)."""
    import socket as _socket
    if base_port == 0:
        probe = _socket.socket(_socket.AF_INET, _socket.SOCK_DGRAM)
        probe.bind(("127.0.0.1", 0))
        base_port = probe.getsockname()[1]
        probe.close()
        if base_port + config.nodes > 65535:
            base_port -= config.nodes
    addresses = {i: ("127.0.0.1", base_port + i)
                 for i in range(config.nodes)}
    nodes = [SocketNode(i, addresses, config) for i in range(config.nodes)]
    for n in nodes:
        n.start()
    return nodes


def preload(nodes: List[SocketNode], key: int, owner: int, value=0,
            degree: int = 3) -> None:
    from .ownership import OwnRec
    from .txlocal import LVL_OWNER, LVL_READER
    n_nodes = len(nodes)
    readers = tuple((owner + i) % n_nodes
                    for i in range(1, min(degree, n_nodes)))
    cfg_dir = nodes[0].rt.directory
    for d in set(cfg_dir) | {owner}:
        nodes[d].rt.own.recs[key] = OwnRec((0, 0), owner, readers)
    nodes[owner].rt.store.seed(key, 0, value, LVL_OWNER)
    nodes[owner].verifier.prime(key, owner, readers)
    for r in readers:
        nodes[r].rt.store.seed(key, 0, value, LVL_READER)
        nodes[r].verifier.prime(key, owner, readers)
