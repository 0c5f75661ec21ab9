"""Transport: deterministic simulated network and a UDP socket backend.

Both backends sit under the same reliable-messaging layer
(:class:`ReliableEndpoint`): per-peer sequence numbers, retransmission on
timeout, duplicate suppression and in-order release.  Above the layer a
live pair of endpoints sees exactly-once, per-pair FIFO delivery; the
fault schedule (loss, duplication, reordering, crashes) applies to raw
packets underneath it.

The simulated backend is a single-context discrete event loop over an
integer clock; one unit is one message hop by default.  Identical seed
and schedule give a byte-identical execution.
"""

from __future__ import annotations

import random
import socket
import threading
import time
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Callable, Dict, List, Optional, Tuple

from .messages import decode_packet, encode_packet

RETRANSMIT_TIMEOUT = 8      # logical units before resending unacked packets
RETRIES_PER_WINDOW = 3      # windows without progress before suspicion
ACK_DELAY = 2               # bare-ack delay when no reverse traffic


class EventLoop:
    """Discrete event loop: integer clock, FIFO tie-break, no threads."""

    __slots__ = ("now", "_heap", "_ctr")

    def __init__(self) -> None:
        self.now = 0
        self._heap: list = []
        self._ctr = 0

    def at(self, t: int, fn, arg=None) -> None:
        self._ctr += 1
        heappush(self._heap, (t, self._ctr, fn, arg))

    def after(self, delay: int, fn, arg=None) -> None:
        self.at(self.now + delay, fn, arg)

    def run(self, until: Optional[int] = None, max_events: int = 0) -> int:
        """Drain events (up to ``until`` inclusive); returns events run."""
        n = 0
        heap = self._heap
        pop = heappop
        if until is None and not max_events:
            while heap:
                t, _, fn, arg = pop(heap)
                self.now = t
                fn(arg)
                n += 1
            return n
        while heap:
            t = heap[0][0]
            if until is not None and t > until:
                break
            t, _, fn, arg = pop(heap)
            self.now = t
            fn(arg)
            n += 1
            if max_events and n >= max_events:
                break
        if until is not None and self.now < until:
            self.now = until
        return n

    def pending(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class FaultSchedule:
    """Seeded description of everything that goes wrong in one run.

    ``crashes`` are (node, time) pairs; ``link_windows`` override the drop
    and duplication probability of one directed link during [t0, t1).
    The same seed and schedule reproduce the same execution byte for byte.
    """

    seed: int = 0
    drop: float = 0.0
    dup: float = 0.0
    reorder: int = 0
    crashes: Tuple[Tuple[int, int], ...] = ()
    link_windows: Tuple[Tuple[int, int, int, int, float, float], ...] = ()

    def faulty(self) -> bool:
        return (self.drop > 0 or self.dup > 0 or self.reorder > 0
                or bool(self.link_windows))


class SimNet:
    """Delivers raw packets between endpoints per the fault schedule."""

    def __init__(self, loop: EventLoop, n_nodes: int,
                 fault: Optional[FaultSchedule] = None, latency: int = 1):
        self.loop = loop
        self.latency = latency
        self.fault = fault or FaultSchedule()
        self.rng = random.Random((self.fault.seed << 1) ^ 0x9E3779B9)
        self.endpoints: List[Optional["ReliableEndpoint"]] = [None] * n_nodes
        self.alive = [True] * n_nodes
        self._faulty = self.fault.faulty()
        self.packets_sent = 0

    def attach(self, node: int, ep: "ReliableEndpoint") -> None:
        self.endpoints[node] = ep

    def crash(self, node: int) -> None:
        self.alive[node] = False
        ep = self.endpoints[node]
        if ep is not None:
            ep.alive = False

    def _link_probs(self, src: int, dst: int) -> Tuple[float, float]:
        f = self.fault
        drop, dup = f.drop, f.dup
        if f.link_windows:
            now = self.loop.now
            for (s, d, t0, t1, pd, pu) in f.link_windows:
                if s == src and d == dst and t0 <= now < t1:
                    drop, dup = pd, pu
        return drop, dup

    def send(self, src: int, dst: int, pkt) -> None:
        # crash-stop: traffic to or from a crashed node silently vanishes
        if not (self.alive[src] and self.alive[dst]):
            return
        self.packets_sent += 1
        ep = self.endpoints[dst]
        loop = self.loop
        delay = self.latency
        if self._faulty:
            f = self.fault
            rnd = self.rng.random
            if f.link_windows:
                drop, dup = self._link_probs(src, dst)
            else:
                drop, dup = f.drop, f.dup
            if drop and rnd() < drop:
                return
            if f.reorder:
                delay += int(rnd() * (f.reorder + 1))
            loop.at(loop.now + delay, ep.on_packet, pkt)
            if dup and rnd() < dup:
                loop.at(loop.now + delay + 1, ep.on_packet, pkt)
            return
        loop.at(loop.now + delay, ep.on_packet, pkt)


class ReliableEndpoint:
    """Per-node reliable messaging: retransmit, de-dup, in-order release.

    Every outgoing data packet piggybacks a cumulative ack for the reverse
    direction; a bare ack goes out after ACK_DELAY when there is nothing
    to piggyback on.  One retransmit timer per peer covers all unacked
    packets on that link (go-back-all).  Per-peer state lives in one list
    (see the _P_* indexes) to keep the per-packet cost down.
    """

    __slots__ = ("node", "net", "loop", "deliver", "alive", "peers",
                 "suspect", "gone")

    # peer state list indexes
    _OUT = 0      # next outgoing sequence number
    _RET = 1      # retained unacked messages: seq -> msg
    _LOW = 2      # lowest retained sequence number
    _AGE = 3      # send time of the oldest unacked packet
    _RTG = 4      # retransmit timer generation
    _WANT = 5     # next expected incoming sequence number
    _HB = 6       # holdback buffer for reordered packets
    _OWE = 7      # an ack is owed to this peer
    _ACKG = 8     # bare-ack timer generation
    _TRIES = 9    # retransmit windows without progress

    def __init__(self, node: int, net, loop, deliver: Callable,
                 suspect: Optional[Callable] = None):
        self.node = node
        self.net = net
        self.loop = loop
        self.deliver = deliver
        self.suspect = suspect
        self.alive = True
        self.gone: set = set()
        self.peers: Dict[int, list] = {}

    def _peer(self, other: int) -> list:
        p = self.peers.get(other)
        if p is None:
            p = self.peers[other] = [0, {}, 0, 0, 0, 0, None, False, 0, 0]
        return p

    # -- sending -----------------------------------------------------------

    def send(self, dst: int, msg) -> None:
        if not self.alive or dst in self.gone:
            return
        if dst == self.node:
            raise ValueError("loopback send")
        p = self.peers.get(dst)
        if p is None:
            p = self.peers[dst] = [0, {}, 0, 0, 0, 0, None, False, 0, 0]
        seq = p[0]
        p[0] = seq + 1
        ret = p[1]
        if not ret:
            p[3] = self.loop.now
            p[4] += 1
            self.loop.after(RETRANSMIT_TIMEOUT, self._retransmit,
                            (dst, p[4]))
        ret[seq] = msg
        p[7] = False
        self.net.send(self.node, dst, (self.node, seq, p[5] - 1, msg))

    # -- receiving ----------------------------------------------------------

    def on_packet(self, pkt) -> None:
        if not self.alive:
            return
        src, seq, ack, msg = pkt
        p = self.peers.get(src)
        if p is None:
            p = self.peers[src] = [0, {}, 0, 0, 0, 0, None, False, 0, 0]
        ret = p[1]
        if ack >= 0 and ret:
            low = p[2]
            if low <= ack:
                while low <= ack:
                    ret.pop(low, None)
                    low += 1
                p[2] = low
                if ret:
                    p[3] = self.loop.now
                else:
                    p[9] = 0
        if seq is None:
            return
        want = p[5]
        if seq == want:
            p[5] = want + 1
            if not p[7]:
                p[7] = True
                p[8] += 1
                self.loop.after(ACK_DELAY, self._bare_ack, (src, p[8]))
            self.deliver(src, msg)
            hb = p[6]
            if hb:
                want = p[5]
                while want in hb:
                    p[5] = want + 1
                    self.deliver(src, hb.pop(want))
                    want = p[5]
        elif seq > want:
            hb = p[6]
            if hb is None:
                hb = p[6] = {}
            hb[seq] = msg
        elif not p[7]:
            # stale duplicate: re-ack so the sender can release it
            p[7] = True
            p[8] += 1
            self.loop.after(ACK_DELAY, self._bare_ack, (src, p[8]))

    def _bare_ack(self, arg) -> None:
        src, gen = arg
        if not self.alive:
            return
        p = self.peers.get(src)
        if p is None or p[8] != gen:
            return
        if p[7]:
            p[7] = False
            self.net.send(self.node, src, (self.node, None, p[5] - 1, None))

    def _retransmit(self, arg) -> None:
        dst, gen = arg
        if not self.alive:
            return
        p = self.peers.get(dst)
        if p is None or p[4] != gen:
            return
        ret = p[1]
        if not ret:
            return
        if self.loop.now - p[3] >= RETRANSMIT_TIMEOUT:
            p[9] += 1
            if self.suspect is not None and p[9] >= RETRIES_PER_WINDOW:
                self.suspect(dst)
            ack = p[5] - 1
            for seq, msg in ret.items():
                self.net.send(self.node, dst, (self.node, seq, ack, msg))
            p[3] = self.loop.now
        p[4] += 1
        self.loop.after(RETRANSMIT_TIMEOUT, self._retransmit, (dst, p[4]))

    def forget_peer(self, peer: int) -> None:
        """Stop all traffic to a node declared dead by membership."""
        self.gone.add(peer)
        p = self.peers.get(peer)
        if p is not None:
            p[1].clear()
            p[6] = None
            p[7] = False
            p[9] = 0


# -- socket backend ---------------------------------------------------------


class ThreadedLoop:
    """EventLoop interface over wall-clock time for the socket backend.

    One instance runs inside its node's single handler thread; ``poll``
    interleaves due timers with queued inbound packets, preserving the
    serial handler model of the simulated backend.  One logical unit is
    one millisecond.
    """

    def __init__(self) -> None:
        self._heap: list = []
        self._ctr = 0
        self._t0 = time.monotonic()

    @property
    def now(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def at(self, t: int, fn, arg=None) -> None:
        self._ctr += 1
        heappush(self._heap, (t, self._ctr, fn, arg))

    def after(self, delay: int, fn, arg=None) -> None:
        self.at(self.now + delay, fn, arg)

    def next_due(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def run_due(self) -> None:
        while self._heap and self._heap[0][0] <= self.now:
            _, _, fn, arg = heappop(self._heap)
            fn(arg)


class SocketNet:
    """Datagram fabric over UDP; wire format shared with the simulator."""

    def __init__(self, node: int, addresses: Dict[int, Tuple[str, int]]):
        self.node = node
        self.addresses = addresses
        self.node_of = {addr: n for n, addr in addresses.items()}
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(addresses[node])
        self.sock.settimeout(0.01)
        self.inbox: list = []
        self._lock = threading.Lock()
        self._stop = False
        self._thread = threading.Thread(target=self._pump, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def attach(self, node: int, ep) -> None:
        pass  # delivery is pulled from the inbox by the node thread

    def _pump(self) -> None:
        while not self._stop:
            try:
                buf, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            src = self.node_of.get(addr, -1)
            with self._lock:
                self.inbox.append((src, buf))

    def drain(self) -> list:
        with self._lock:
            out, self.inbox = self.inbox, []
        return out

    def send(self, src: int, dst: int, pkt) -> None:
        _, seq, ack, msg = pkt
        try:
            self.sock.sendto(encode_packet(seq, ack, msg),
                             self.addresses[dst])
        except OSError:
            pass

    def close(self) -> None:
        self._stop = True
        self.sock.close()


def decode_datagram(buf: bytes, src_hint: int = -1):
    """Turn raw datagram bytes back into the endpoint packet tuple."""
    seq, ack, msg = decode_packet(buf)
    return (src_hint, seq, ack, msg)
