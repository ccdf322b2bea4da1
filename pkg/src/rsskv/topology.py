"""Shard placement and the cost model for 2PC coordinator choice.

Static hash partitioning: a key lives on exactly one shard for the whole
run (scripted scenarios may pin keys explicitly). Each shard has a stable
leader region and follower regions; replication cost is the ack round trip
to the floor(n/2)-th nearest follower.

``commit_estimate`` is the jitter-free minimum latency of the whole commit
path as seen by the client: reach the coordinator, gather the slowest
participant's prepare (including its replication), replicate the commit
record, return the outcome — floored by the commit-wait tail of 2*eps. Every
real run adds jitter, queueing, and lock waits on top, so the estimate is a
true lower bound; clients use it both to pick the cheapest coordinator and
to stamp read-write transactions with their earliest possible end time.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from .simnet import LatencyMatrix
from .timebase import TrueTimeConfig


@dataclass
class ShardInfo:
    shard_id: str
    leader_node: str
    leader_region: str
    follower_regions: tuple


@dataclass
class Topology:
    matrix: LatencyMatrix
    clock: TrueTimeConfig
    shards: dict  # shard_id -> ShardInfo
    placement: dict = field(default_factory=dict)  # explicit key -> shard_id
    _order: list = field(default_factory=list)

    def __post_init__(self):
        self._order = sorted(self.shards)

    def shard_of(self, key: str) -> str:
        pinned = self.placement.get(key)
        if pinned is not None:
            return pinned
        return self._order[zlib.crc32(key.encode()) % len(self._order)]

    def leader_node(self, shard_id: str) -> str:
        return self.shards[shard_id].leader_node

    def group_by_shard(self, keys) -> dict:
        out: dict[str, list] = {}
        for k in sorted(keys):
            out.setdefault(self.shard_of(k), []).append(k)
        return {s: tuple(ks) for s, ks in sorted(out.items())}

    # -- commit cost model -------------------------------------------------

    def repl_commit_us(self, shard_id: str) -> int:
        """Majority-ack delay at a shard's log: k-th nearest follower RTT."""
        info = self.shards[shard_id]
        n = 1 + len(info.follower_regions)
        k = n // 2
        if k == 0:
            return 0
        rtts = sorted(self.matrix.rtt_us(info.leader_region, r)
                      for r in info.follower_regions)
        return rtts[k - 1]

    def commit_estimate_us(self, client_region: str, participants, coord: str) -> int:
        ow = self.matrix.one_way_us
        leader = lambda s: self.shards[s].leader_region
        gather = 0
        for p in participants:
            if p == coord:
                continue
            leg = ow(leader(coord), leader(p)) + self.repl_commit_us(p) \
                + ow(leader(p), leader(coord))
            gather = max(gather, leg)
        tail = max(self.repl_commit_us(coord) + ow(leader(coord), client_region),
                   2 * self.clock.epsilon_us + 1)
        return ow(client_region, leader(coord)) + gather + tail

    def choose_coordinator(self, client_region: str, participants) -> tuple:
        """Coordinator minimizing estimated commit latency; returns
        (shard_id, estimate_us). Ties break on shard id for determinism."""
        best = None
        for coord in sorted(participants):
            est = self.commit_estimate_us(client_region, participants, coord)
            if best is None or est < best[1]:
                best = (coord, est)
        return best
