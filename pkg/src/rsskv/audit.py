"""Runtime invariant audit: protocol-level checks over a whole run.

Long runs are too big for full serialization checking, so the harness
validates protocol invariants directly instead:

  * every committed read-write transaction's commit timestamp lies strictly
    inside its invocation/response window in sim time;
  * per key, the committed version log is strictly increasing in commit
    timestamp, so conflicting writers never share one;
  * a read-write transaction that observed a writer's value commits strictly
    after that writer;
  * every read-only transaction has t_snap <= t_read and returned, per key,
    exactly the version with the greatest commit timestamp at or below
    t_snap, judged against the shards' committed version logs;
  * the stored earliest-end-time of every prepared transaction never ran
    more than the fence bound L past its commit timestamp (violations are
    reported, not silently tolerated — the fence guarantee depends on L).

The audit holds everything in memory; it is meant for desk-scale runs
(hundreds of thousands of transactions) where full checking is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .timebase import TS_ZERO, Timestamp


@dataclass
class RwRecord:
    svc: str
    txn: str
    invoke_us: int
    respond_us: int
    t_c: Timestamp
    writes: dict
    reads: dict
    start_ts: Timestamp


@dataclass
class RoRecord:
    svc: str
    txn: str
    invoke_us: int
    respond_us: int
    t_read: Timestamp
    t_snap: Timestamp
    result: dict  # key -> Version


@dataclass
class RunAudit:
    l_us: int | None = None
    epsilon_us: int = 0
    rws: list = field(default_factory=list)
    ros: list = field(default_factory=list)
    max_tee_past_tc_us: int = 0
    tee_violations: list = field(default_factory=list)

    # -- hooks wired into client and shards --------------------------------

    def on_rw(self, svc, txn, invoke_us, respond_us, t_c, writes, reads, start_ts):
        self.rws.append(RwRecord(svc, txn, invoke_us, respond_us, t_c,
                                 dict(writes), dict(reads), start_ts))

    def on_ro(self, svc, txn, invoke_us, respond_us, t_read, t_snap, result):
        self.ros.append(RoRecord(svc, txn, invoke_us, respond_us, t_read,
                                 t_snap, dict(result)))

    def on_participant_decide(self, shard, txn, t_ee, t_c):
        gap = t_ee.us - t_c.us
        if gap > self.max_tee_past_tc_us:
            self.max_tee_past_tc_us = gap
        if self.l_us is not None and gap > self.l_us:
            self.tee_violations.append((shard, txn, gap))

    def on_coordinator_commit(self, txn, t_c, t_ee_final):
        gap = t_ee_final.us - t_c.us
        if gap > self.max_tee_past_tc_us:
            self.max_tee_past_tc_us = gap
        if self.l_us is not None and gap > self.l_us:
            self.tee_violations.append(("coordinator", txn, gap))

    # -- validation ----------------------------------------------------------

    def validate(self, stores: dict) -> list:
        """Check all invariants against final committed version logs.

        ``stores``: svc -> key -> ordered list of Version. Returns a list of
        violation strings (empty means the run is clean)."""
        problems: list[str] = []
        committed_tc: dict = {}  # (svc, txn) -> t_c

        for r in self.rws:
            committed_tc[(r.svc, r.txn)] = r.t_c
            if not (r.invoke_us < r.t_c.us < r.respond_us):
                problems.append(
                    f"rw {r.txn}: t_c {r.t_c.us} not inside "
                    f"({r.invoke_us}, {r.respond_us})")

        for svc, store in sorted(stores.items()):
            for key, versions in sorted(store.items()):
                for a, b in zip(versions, versions[1:]):
                    if not a.t_c < b.t_c:
                        problems.append(
                            f"{svc}:{key}: version order violated "
                            f"({a.t_c} then {b.t_c})")

        for r in self.rws:
            for key, observed in sorted(r.reads.items()):
                if observed is None:
                    continue
                w_tc = committed_tc.get((r.svc, observed))
                if w_tc is None:
                    problems.append(f"rw {r.txn} observed uncommitted {observed}")
                elif not w_tc < r.t_c:
                    problems.append(
                        f"rw {r.txn} (t_c {r.t_c}) read from {observed} "
                        f"with t_c {w_tc} not strictly earlier")

        for r in self.ros:
            if not r.t_snap <= r.t_read:
                problems.append(f"ro {r.txn}: t_snap {r.t_snap} > t_read {r.t_read}")
            store = stores.get(r.svc, {})
            for key, got in sorted(r.result.items()):
                expect_tc, expect_writer = TS_ZERO, None
                for v in store.get(key, ()):
                    if v.t_c <= r.t_snap:
                        expect_tc, expect_writer = v.t_c, v.value
                    else:
                        break
                if (got.t_c, got.value) != (expect_tc, expect_writer):
                    problems.append(
                        f"ro {r.txn} {key}: returned {got.value}@{got.t_c}, "
                        f"store says {expect_writer}@{expect_tc} at t_snap {r.t_snap}")

        for shard, txn, gap in self.tee_violations:
            problems.append(f"t_ee bound: {txn} at {shard} ran {gap}us past t_c "
                            f"(L={self.l_us})")
        return problems
