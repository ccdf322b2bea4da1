"""Per-shard leader-based replicated log (Multi-Paxos/VR stand-in).

The model keeps replication's latency cost and its safe-time bookkeeping and
drops everything else. Leaders are stable for a whole run, leases are always
valid, followers store entries but never serve reads, and there is no view
change or truncation. An entry is committed once the leader collects acks
from a majority of the group, counting itself — i.e. from the floor(n/2)
nearest followers — and all earlier entries have committed (commit is
in-order).

Entry timestamps strictly increase along the log. ``max_write_ts`` is the
largest timestamp in the committed prefix; it is the shard's safe time.
Once a reader has waited for ``max_write_ts >= t_read``, every prepare
timestamp chosen at the shard afterwards exceeds t_read, because prepares
are chosen above both the log tail and the safe time.

``safe_time_wait`` implements that wait. Within its lease the leader may
advance the safe time without a quorum: it appends a zero-payload entry
stamped just above t_read that commits with no follower round trip (it still
queues behind any entry whose quorum is outstanding, keeping commit
in-order). With leases disabled, the wait releases only when a real
replicated write at or above t_read commits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .simnet import Future, Simulation
from .timebase import TS_ZERO, Timestamp, above

NOOP = ("noop",)


@dataclass(frozen=True)
class ReplAppend:
    shard: str
    index: int
    ts: Timestamp


@dataclass(frozen=True)
class ReplAck:
    shard: str
    index: int


@dataclass
class _Entry:
    ts: Timestamp
    payload: object
    need_acks: int
    acks: int = 0
    committed: bool = False
    commit_fut: Future = None


@dataclass
class _Follower:
    node_id: str
    entries: list = field(default_factory=list)


class ReplicatedLog:
    def __init__(self, sim: Simulation, shard_id: str, leader_node: str,
                 follower_nodes: list[str], lease_enabled: bool = True):
        self.sim = sim
        self.shard_id = shard_id
        self.leader_node = leader_node
        self.lease_enabled = lease_enabled
        self.entries: list[_Entry] = []
        self.committed_prefix = 0
        self.max_write_ts = TS_ZERO
        self.last_ts = TS_ZERO
        n = 1 + len(follower_nodes)
        self.need_acks = n // 2
        self.followers = []
        for node in follower_nodes:
            follower = _Follower(node)
            sim.set_handler(node, self._follower_handler(follower))
            self.followers.append(follower)
        self._safe_waiters: list[tuple[Timestamp, Future]] = []

    def _follower_handler(self, follower: _Follower):
        def handle(src, msg):
            if isinstance(msg, ReplAppend):
                follower.entries.append((msg.index, msg.ts))
                self.sim.send(follower.node_id, self.leader_node,
                              ReplAck(msg.shard, msg.index))
        return handle

    def append(self, ts: Timestamp, payload, replicate: bool = True) -> Future:
        """Append an entry; the future resolves at commit time."""
        assert ts > self.last_ts, f"log ts must increase: {ts} after {self.last_ts}"
        index = len(self.entries)
        entry = _Entry(ts, payload, self.need_acks if replicate else 0,
                       commit_fut=self.sim.future(f"log[{self.shard_id}][{index}]"))
        self.entries.append(entry)
        self.last_ts = ts
        if replicate:
            for follower in self.followers:
                self.sim.send(self.leader_node, follower.node_id,
                              ReplAppend(self.shard_id, index, ts))
        self._advance()
        return entry.commit_fut

    def handle(self, src, msg) -> bool:
        """Give the leader's node handler a chance to consume an ack."""
        if isinstance(msg, ReplAck) and msg.shard == self.shard_id:
            entry = self.entries[msg.index]
            entry.acks += 1
            self._advance()
            return True
        return False

    def _advance(self):
        while self.committed_prefix < len(self.entries):
            entry = self.entries[self.committed_prefix]
            if entry.acks < entry.need_acks:
                break
            entry.committed = True
            self.committed_prefix += 1
            assert entry.ts > self.max_write_ts
            self.max_write_ts = entry.ts
            entry.commit_fut.resolve(entry.ts)
        if self._safe_waiters:
            still = []
            for t_read, fut in self._safe_waiters:
                if self.max_write_ts >= t_read:
                    fut.resolve(self.max_write_ts)
                else:
                    still.append((t_read, fut))
            self._safe_waiters = still

    def safe_time_wait(self, t_read: Timestamp):
        """Coroutine: return once max_write_ts >= t_read."""
        if self.max_write_ts >= t_read:
            return self.max_write_ts
        if self.lease_enabled:
            fut = self.append(above(self.last_ts, t_read), NOOP, replicate=False)
        else:
            fut = self.sim.future(f"safe-time[{self.shard_id}]>={t_read.us}")
            self._safe_waiters.append((t_read, fut))
        if not fut.done:
            yield fut
        return self.max_write_ts
