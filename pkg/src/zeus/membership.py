"""Epoch-based reliable membership with leases.

The membership service is a logically centralized oracle (the deployment
analogue of a ZooKeeper-style service).  Crash reports become a new view
only after the lease window expires; every live node then receives the
same view, tagged with a strictly increasing epoch id.  The oracle also
hosts the recovery barrier: after a view change, ownership requests for
objects whose owner died stay paused until every live node reports that
it finished replaying pending reliable commits of the dead nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Set, Tuple


@dataclass(frozen=True)
class MembershipView:
    e_id: int
    live: Tuple[int, ...]
    lease_expiry: int = 0

    def is_live(self, node: int) -> bool:
        return node in self.live


class MembershipOracle:
    """Delivers consistent views; collects recovery-done signals."""

    def __init__(self, loop, nodes: int, lease: int = 50,
                 deliver: Optional[Callable] = None):
        self.loop = loop
        self.lease = lease
        self.deliver = deliver            # deliver(node_id, view)
        self.e_id = 0
        self.live: Set[int] = set(range(nodes))
        self.reported: Dict[int, int] = {}
        self._bump_scheduled = False
        self._recovery_pending: Set[int] = set()
        self.on_resume: Optional[Callable] = None

    def view(self) -> MembershipView:
        return MembershipView(self.e_id, tuple(sorted(self.live)))

    def report_failure(self, node: int) -> None:
        """Schedule an epoch bump once the dead node's lease has expired."""
        if node not in self.live or node in self.reported:
            return
        self.reported[node] = self.loop.now
        if not self._bump_scheduled:
            self._bump_scheduled = True
            self.loop.after(self.lease, self._bump, None)

    def _bump(self, _arg) -> None:
        self._bump_scheduled = False
        if not self.reported:
            return
        # every reported node's lease must have expired before the view
        due = max(self.reported.values()) + self.lease
        if self.loop.now < due:
            self._bump_scheduled = True
            self.loop.at(due, self._bump, None)
            return
        self.live -= set(self.reported)
        self.reported = {}
        self.e_id += 1
        view = MembershipView(self.e_id, tuple(sorted(self.live)),
                              self.loop.now)
        # all live nodes must finish replaying before requests resume
        self._recovery_pending = set(self.live)
        for node in view.live:
            self.deliver(node, view)

    def recovery_done(self, node: int, e_id: int) -> None:
        if e_id != self.e_id:
            return
        self._recovery_pending.discard(node)
        if not self._recovery_pending and self.on_resume is not None:
            self.on_resume(self.e_id)

    def recovering(self) -> bool:
        return bool(self._recovery_pending)
