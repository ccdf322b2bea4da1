"""Shard-leader state machine: locks, multi-versioned store, 2PC, reads.

One event-driven machine per shard leader owns everything at that shard:

  * a lock table with wound-wait deadlock prevention (age = the client's
    transaction start timestamp; an older requester wounds a younger holder,
    a younger requester waits). A transaction that has prepared is never
    wounded — a prepared participant can no longer abort unilaterally
    without breaking two-phase commit, so older requesters wait for it.
  * the prepared-transaction set: (txn, locks, t_p, t_ee, write set). The
    prepare timestamp is chosen strictly above every timestamp previously
    committed or prepared here, above the replicated log's tail, and above
    the local TrueTime latest bound.
  * committed versions, at most one per (key, t_c), applied in strictly
    increasing timestamp order per key. Never-written keys read as a
    distinguished initial version at t_c = 0 with value None.
  * participant and coordinator roles in 2PC. Participants validate locks,
    acquire write locks, choose t_p, replicate the prepare, and ack. The
    coordinator gathers acks, acquires its own write locks, chooses
    t_c >= every t_p and strictly above the transaction's start timestamp
    and its own local floor, replicates the commit record, then applies,
    releases, and fans out the decision. Duplicate decisions are idempotent.

The read-only hander follows the fast-reply/slow-reply scheme. After the
safe-time wait the handler collects conflicting prepared records with
t_p <= t_read. In "ss" mode it blocks on all of them (classic behavior); in
"rss" mode it blocks only on records that must be observed (t_p <= t_min) or
that could have finished before the reader began (t_ee <= t_read), and skips
the rest, reporting (txn, t_p) pairs in the fast reply so the client can
verify its snapshot. Every skipped record later produces exactly one slow
reply to that reader carrying the decision. With ``fastpath_writes`` on, the
fast reply also carries a skipped record's buffered writes so a client that
can already prove the commit (it saw the writer's version at another shard)
does not have to wait for the slow reply.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

from .replication import ReplicatedLog
from .simnet import Future, Simulation
from .timebase import TS_ZERO, Timestamp, TrueTimeConfig, above, tt_now
from .topology import Topology

MODE_SS = "ss"
MODE_RSS = "rss"

COMMIT = "commit"
ABORT = "abort"


class Version(NamedTuple):
    t_c: Timestamp
    key: str
    value: str | None  # writer transaction id; None = initial value


INITIAL = lambda key: Version(TS_ZERO, key, None)


# -- wire messages ---------------------------------------------------------

@dataclass(frozen=True)
class RwRead:
    txn: str
    key: str
    start_ts: Timestamp


@dataclass(frozen=True)
class RwReadReply:
    txn: str
    key: str
    ok: bool
    value: str | None = None
    t_c: Timestamp = TS_ZERO


@dataclass(frozen=True)
class Wounded:
    txn: str


@dataclass(frozen=True)
class AbortTxn:
    txn: str


@dataclass(frozen=True)
class CommitTxn:
    txn: str
    start_ts: Timestamp
    t_ee: Timestamp
    plan: tuple  # ((shard_id, (keys...), {key: value}), ...) sorted by shard


@dataclass(frozen=True)
class Prepare:
    txn: str
    writes: tuple  # ((key, value), ...)
    t_ee: Timestamp
    start_ts: Timestamp


@dataclass(frozen=True)
class PrepareOk:
    txn: str
    t_p: Timestamp
    t_ee: Timestamp  # possibly advanced by wound-wait blocking


@dataclass(frozen=True)
class PrepareFail:
    txn: str


@dataclass(frozen=True)
class Decide:
    txn: str
    outcome: str
    t_c: Timestamp | None


@dataclass(frozen=True)
class TxnOutcome:
    txn: str
    outcome: str
    t_c: Timestamp | None = None
    t_ee: Timestamp | None = None


@dataclass(frozen=True)
class ROCommit:
    ro: str
    keys: tuple
    t_read: Timestamp
    t_min: Timestamp


@dataclass(frozen=True)
class ROFastReply:
    ro: str
    shard: str
    skipped: tuple  # ((txn, t_p, carried_writes|None), ...)
    versions: tuple  # one Version per requested key


@dataclass(frozen=True)
class ROSlowReply:
    ro: str
    shard: str
    txn: str
    decision: str
    t_c: Timestamp | None
    versions: tuple


@dataclass
class PreparedRecord:
    txn: str
    t_p: Timestamp
    t_ee: Timestamp
    writes: dict  # key -> value
    decision_fut: Future


def split_blocking(records, keys, t_read: Timestamp, t_min: Timestamp, mode: str):
    """Partition conflicting prepared records into (blocking, skippable).

    A record conflicts when it writes one of the read keys and prepared at
    or below t_read. In ss mode everything conflicting blocks. In rss mode a
    record blocks only if a causal constraint forces it (t_p <= t_min) or it
    could have ended before the reader began (t_ee <= t_read)."""
    keyset = set(keys)
    conflicting = [r for r in records
                   if r.t_p <= t_read and keyset.intersection(r.writes)]
    conflicting.sort(key=lambda r: (r.t_p, r.txn))
    if mode == MODE_SS:
        return conflicting, []
    blocking, skippable = [], []
    for r in conflicting:
        if r.t_p <= t_min or r.t_ee <= t_read:
            blocking.append(r)
        else:
            skippable.append(r)
    return blocking, skippable


# -- lock table ------------------------------------------------------------
#
# Deadlock prevention is wound-wait with two refinements forced by 2PC:
#
#   * Once a transaction's prepare is logged at a shard ("logged"), that
#     shard can no longer abort it unilaterally, so logged holders are never
#     wounded; requesters wait for the decision instead.
#   * Waiting must therefore never form a cycle back into a logged holder's
#     decision path. Commit-phase lock acquisition is made non-circular:
#     a coordinator acquiring its own write locks never waits on a conflict
#     it cannot wound (it aborts its transaction instead), and a participant
#     prepare fails rather than wait behind an older still-executing holder.
#     All remaining wait edges either go from younger to strictly older
#     transactions or point at transactions whose decision is already
#     guaranteed to arrive, so they cannot cycle.
#
# Requests sit in a per-key queue ordered by transaction age and are
# re-evaluated on every lock-state change: an old requester wounds younger
# unlogged holders even if they acquired the lock after it blocked (hot-key
# read/upgrade convoys otherwise wedge), and new readers cannot slip past an
# older queued writer.

REQ_READ = "read"        # execution-phase read lock
REQ_PREPARE = "prepare"  # participant write locks at prepare
REQ_COORD = "coord"      # coordinator's own write locks


@dataclass
class _LockReq:
    txn: str
    mode: str  # "r" | "w"
    phase: str
    start_ts: Timestamp
    fut: Future
    dead: bool = False


@dataclass
class _LockState:
    readers: dict = field(default_factory=dict)  # txn -> None, ordered
    writer: str | None = None
    queue: list = field(default_factory=list)    # _LockReq, age-ordered


@dataclass
class _TxnState:
    txn: str
    client_node: str | None
    start_ts: Timestamp
    read_held: dict = field(default_factory=dict)
    write_held: dict = field(default_factory=dict)
    waiting: list = field(default_factory=list)  # (key, _LockReq)
    dead: bool = False        # wounded or aborted
    committing: bool = False  # commit request reached this shard
    prepared: bool = False    # logged: wound-exempt once set
    blocked_us: int = 0


class ShardServer:
    def __init__(self, sim: Simulation, topo: Topology, shard_id: str,
                 log: ReplicatedLog, mode: str = MODE_RSS,
                 fastpath_writes: bool = True, tee_adjust: bool = True,
                 audit=None):
        self.sim = sim
        self.topo = topo
        self.shard_id = shard_id
        self.info = topo.shards[shard_id]
        self.node = self.info.leader_node
        self.clock: TrueTimeConfig = topo.clock
        self.log = log
        self.mode = mode
        self.fastpath_writes = fastpath_writes
        self.tee_adjust = tee_adjust
        self.audit = audit
        self.store: dict[str, list[Version]] = {}
        self.locks: dict[str, _LockState] = {}
        self.txns: dict[str, _TxnState] = {}
        self.prepared: dict[str, PreparedRecord] = {}
        self.decided: dict[str, tuple] = {}
        self.committed_max = TS_ZERO
        self.prepared_max = TS_ZERO
        self._gather: dict[str, dict] = {}  # txn -> 2pc gather state
        self._dirty: dict[str, None] = {}
        self._draining = False
        sim.set_handler(self.node, self.handle)

    # -- dispatch ----------------------------------------------------------

    def handle(self, src, msg):
        if self.log.handle(src, msg):
            return
        if isinstance(msg, RwRead):
            self.sim.spawn(self._rw_read(src, msg), f"{self.shard_id}:read:{msg.txn}")
        elif isinstance(msg, CommitTxn):
            self.sim.spawn(self._coordinate(src, msg), f"{self.shard_id}:2pc:{msg.txn}")
        elif isinstance(msg, Prepare):
            self.sim.spawn(self._prepare(src, msg), f"{self.shard_id}:prep:{msg.txn}")
        elif isinstance(msg, (PrepareOk, PrepareFail)):
            self._on_prepare_reply(src, msg)
        elif isinstance(msg, Decide):
            self._apply_decide(msg.txn, msg.outcome, msg.t_c)
        elif isinstance(msg, AbortTxn):
            st = self.txns.get(msg.txn)
            if st is not None and not st.prepared and msg.txn not in self.decided:
                self._kill(st, notify=False)
        elif isinstance(msg, ROCommit):
            self.sim.spawn(self._ro_commit(src, msg), f"{self.shard_id}:ro:{msg.ro}")
        else:
            raise RuntimeError(f"unhandled message {msg!r}")

    # -- versions ----------------------------------------------------------

    def read_at(self, key: str, t: Timestamp) -> Version:
        """Latest committed version with t_c <= t (initial version if none)."""
        best = INITIAL(key)
        for v in reversed(self.store.get(key, ())):
            if v.t_c <= t:
                best = v
                break
        return best

    def _apply_version(self, key: str, t_c: Timestamp, writer: str):
        versions = self.store.setdefault(key, [])
        assert not versions or t_c > versions[-1].t_c, \
            f"version order violated at {self.shard_id}:{key}"
        versions.append(Version(t_c, key, writer))

    # -- lock management -----------------------------------------------------

    def _conflicting(self, ls: _LockState, txn: str, mode: str):
        out = []
        if ls.writer is not None and ls.writer != txn:
            out.append(ls.writer)
        if mode == "w":
            out.extend(t for t in ls.readers if t != txn and t != ls.writer)
        return out

    def _acquire(self, st: _TxnState, key: str, mode: str, phase: str):
        """Coroutine: queue a lock request; returns True iff granted.

        False means the transaction is gone at this shard: wounded, aborted,
        or self-failed by the commit-phase no-wait rules."""
        if st.dead:
            return False
        ls = self.locks.setdefault(key, _LockState())
        req = _LockReq(st.txn, mode, phase, st.start_ts, self.sim.future(
            f"lock:{self.shard_id}:{key}:{st.txn}"))
        at = len(ls.queue)
        while at > 0 and (ls.queue[at - 1].start_ts, ls.queue[at - 1].txn) \
                > (st.start_ts, st.txn):
            at -= 1
        ls.queue.insert(at, req)
        st.waiting.append((key, req))
        self._touch(key)
        if req.fut.done:
            return req.fut.value
        blocked_from = self.sim.now_us
        granted = yield req.fut
        st.blocked_us += self.sim.now_us - blocked_from
        return granted

    def _grant(self, ls: _LockState, st: _TxnState, key: str, mode: str):
        if mode == "r":
            ls.readers[st.txn] = None
            st.read_held[key] = None
        else:
            assert ls.writer in (None, st.txn)
            ls.writer = st.txn
            st.write_held[key] = None

    def _touch(self, key: str):
        """Re-evaluate a key's queue; nested touches fold into one drain."""
        self._dirty[key] = None
        if self._draining:
            return
        self._draining = True
        try:
            while self._dirty:
                k = next(iter(self._dirty))
                del self._dirty[k]
                self._service_queue(k)
        finally:
            self._draining = False

    def _holder_unwoundable(self, hst: _TxnState) -> bool:
        return hst.prepared

    def _service_queue(self, key: str):
        ls = self.locks.get(key)
        if ls is None:
            return
        for req in list(ls.queue):
            if req.dead:
                continue
            st = self.txns[req.txn]
            if st.dead:
                self._drop_req(ls, st, req)
                req.fut.resolve(False)
                continue
            # wound-wait: an older requester wounds younger unlogged holders,
            # including ones that acquired after it blocked
            for holder in self._conflicting(ls, req.txn, req.mode):
                hst = self.txns[holder]
                if not hst.prepared and hst.start_ts > st.start_ts:
                    self._kill(hst, notify=True)
            conflicts = self._conflicting(ls, req.txn, req.mode)
            blocked_ahead = any(
                not prior.dead and prior.txn != req.txn
                and (prior.mode == "w" or req.mode == "w")
                for prior in ls.queue[:ls.queue.index(req)])
            if not conflicts and not blocked_ahead:
                self._drop_req(ls, st, req)
                self._grant(ls, st, key, req.mode)
                req.fut.resolve(True)
                continue
            if conflicts and self._must_die(req, st, conflicts):
                self._drop_req(ls, st, req)
                req.fut.resolve(False)
        if not ls.readers and ls.writer is None and not ls.queue:
            del self.locks[key]

    def _must_die(self, req: _LockReq, st: _TxnState, conflicts) -> bool:
        """Commit-phase no-wait rules; every surviving wait edge is acyclic.

        A coordinator gives up on any conflict it could not wound. A prepare
        gives up when blocked by an older holder still in its execution
        phase (that holder may later wait on one of our logged locks). Both
        may wait on logged holders and on older committing holders, whose
        decisions cannot depend on us."""
        if req.phase == REQ_COORD:
            return True
        if req.phase == REQ_PREPARE:
            return any(not self.txns[h].committing and not self.txns[h].prepared
                       for h in conflicts)
        return False

    def _drop_req(self, ls: _LockState, st: _TxnState, req: _LockReq):
        req.dead = True
        ls.queue.remove(req)
        st.waiting = [(k, r) for k, r in st.waiting if r is not req]

    def _release_all(self, st: _TxnState):
        keys = list(st.read_held) + [k for k in st.write_held if k not in st.read_held]
        for key in st.read_held:
            ls = self.locks.get(key)
            if ls is not None:
                ls.readers.pop(st.txn, None)
        for key in st.write_held:
            ls = self.locks.get(key)
            if ls is not None and ls.writer == st.txn:
                ls.writer = None
        st.read_held.clear()
        st.write_held.clear()
        for key in keys:
            self._touch(key)

    def _kill(self, st: _TxnState, notify: bool):
        """Wound or abort a not-yet-logged transaction at this shard."""
        assert not st.prepared
        st.dead = True
        for key, req in st.waiting:
            req.dead = True
            req.fut.resolve(False)
            ls = self.locks.get(key)
            if ls is not None and req in ls.queue:
                ls.queue.remove(req)
        st.waiting.clear()
        self._release_all(st)
        if notify and st.client_node is not None:
            self.sim.send(self.node, st.client_node, Wounded(st.txn))

    def _txn_state(self, txn: str, client_node, start_ts: Timestamp) -> _TxnState:
        st = self.txns.get(txn)
        if st is None:
            st = _TxnState(txn, client_node, start_ts)
            self.txns[txn] = st
        elif st.client_node is None:
            st.client_node = client_node
        return st

    # -- read-write execution ---------------------------------------------

    def _rw_read(self, src, msg: RwRead):
        st = self._txn_state(msg.txn, src, msg.start_ts)
        if st.dead or msg.txn in self.decided:
            self.sim.send(self.node, src, RwReadReply(msg.txn, msg.key, ok=False))
            return
        granted = yield from self._acquire(st, msg.key, "r", REQ_READ)
        if not granted:
            self.sim.send(self.node, src, RwReadReply(msg.txn, msg.key, ok=False))
            return
        v = self._latest(msg.key)
        self.sim.send(self.node, src,
                      RwReadReply(msg.txn, msg.key, ok=True, value=v.value, t_c=v.t_c))

    def _latest(self, key: str) -> Version:
        versions = self.store.get(key)
        return versions[-1] if versions else INITIAL(key)

    # -- 2PC participant ----------------------------------------------------

    def _choose_prepare_ts(self) -> Timestamp:
        latest = Timestamp(tt_now(self.clock, self.sim.now_us).latest_us)
        t_p = above(self.committed_max, self.prepared_max, self.log.last_ts, latest)
        self.prepared_max = t_p
        return t_p

    def _prepare(self, src, msg: Prepare):
        st = self._txn_state(msg.txn, None, msg.start_ts)
        ok = yield from self._acquire_writes(st, dict(msg.writes), REQ_PREPARE)
        if not ok:
            self.sim.send(self.node, src, PrepareFail(msg.txn))
            return
        st.prepared = True
        t_p = self._choose_prepare_ts()
        t_ee = msg.t_ee.shift_us(st.blocked_us) if self.tee_adjust else msg.t_ee
        rec = PreparedRecord(msg.txn, t_p, t_ee, dict(msg.writes),
                             self.sim.future(f"decide:{self.shard_id}:{msg.txn}"))
        self.prepared[msg.txn] = rec
        committed = self.log.append(t_p, ("prepare", msg.txn))
        if not committed.done:
            yield committed
        if msg.txn in self.decided:  # aborted while replicating
            return
        self.sim.send(self.node, src, PrepareOk(msg.txn, t_p, t_ee))

    def _acquire_writes(self, st: _TxnState, writes: dict, phase: str):
        """Coroutine: lock validation plus write-lock acquisition.

        Read-lock validation is the dead check: a wound releases every lock
        the transaction held here and marks it dead."""
        st.committing = True
        if st.dead or st.txn in self.decided:
            return False
        for key in sorted(writes):
            granted = yield from self._acquire(st, key, "w", phase)
            if not granted:
                return False
        if st.dead or st.txn in self.decided:
            return False
        return True

    def _apply_decide(self, txn: str, outcome: str, t_c: Timestamp | None,
                      writes: dict | None = None):
        """Apply a 2PC decision; duplicates are no-ops."""
        if txn in self.decided:
            return
        self.decided[txn] = (outcome, t_c)
        rec = self.prepared.pop(txn, None)
        st = self.txns.get(txn)
        if outcome == COMMIT:
            if writes is None:
                assert rec is not None, f"commit for unprepared {txn}"
                writes = rec.writes
            for key in sorted(writes):
                self._apply_version(key, t_c, txn)
            self.committed_max = max(self.committed_max, t_c)
            if self.audit is not None and rec is not None:
                self.audit.on_participant_decide(self.shard_id, txn, rec.t_ee, t_c)
        if st is not None:
            st.dead = True  # no further lock activity for this txn here
            for key, req in st.waiting:
                req.dead = True
                req.fut.resolve(False)
                ls = self.locks.get(key)
                if ls is not None and req in ls.queue:
                    ls.queue.remove(req)
            st.waiting.clear()
            self._release_all(st)
        if rec is not None:
            rec.decision_fut.resolve((outcome, t_c))

    # -- 2PC coordinator ----------------------------------------------------

    def _coordinate(self, src, msg: CommitTxn):
        st = self._txn_state(msg.txn, src, msg.start_ts)
        st.committing = True
        plan = {shard: (keys, dict(writes)) for shard, keys, writes in msg.plan}
        own_keys, own_writes = plan.get(self.shard_id, ((), {}))
        others = sorted(s for s in plan if s != self.shard_id)

        failed = st.dead
        oks: dict[str, PrepareOk] = {}
        if others and not failed:
            state = {"pending": set(others), "oks": oks,
                     "fut": self.sim.future(f"2pc-gather:{msg.txn}"), "failed": False}
            self._gather[msg.txn] = state
            for shard in others:
                _, writes = plan[shard]
                self.sim.send(self.node, self.topo.leader_node(shard),
                              Prepare(msg.txn, tuple(sorted(writes.items())),
                                      msg.t_ee, msg.start_ts))
            yield state["fut"]
            self._gather.pop(msg.txn, None)
            failed = state["failed"]

        if not failed:
            ok = yield from self._acquire_writes(st, own_writes, REQ_COORD)
            failed = not ok
        if failed:
            for shard in others:
                self.sim.send(self.node, self.topo.leader_node(shard),
                              Decide(msg.txn, ABORT, None))
            self._apply_decide(msg.txn, ABORT, None, writes={})
            self.sim.send(self.node, src, TxnOutcome(msg.txn, ABORT))
            return

        st.prepared = True
        latest = Timestamp(tt_now(self.clock, self.sim.now_us).latest_us)
        floor = above(self.committed_max, self.prepared_max, self.log.last_ts,
                      latest, msg.start_ts)
        t_c = choose_commit_ts([ok.t_p for ok in oks.values()], floor)
        own_t_ee = msg.t_ee.shift_us(st.blocked_us) if self.tee_adjust else msg.t_ee
        t_ee_final = max([ok.t_ee for ok in oks.values()] + [own_t_ee])

        committed = self.log.append(t_c, ("commit", msg.txn))
        if not committed.done:
            yield committed
        self._apply_decide(msg.txn, COMMIT, t_c, writes=own_writes)
        if self.audit is not None:
            self.audit.on_coordinator_commit(msg.txn, t_c, t_ee_final)
        for shard in others:
            self.sim.send(self.node, self.topo.leader_node(shard),
                          Decide(msg.txn, COMMIT, t_c))
        self.sim.send(self.node, src, TxnOutcome(msg.txn, COMMIT, t_c, t_ee_final))

    def _on_prepare_reply(self, src, msg):
        state = self._gather.get(msg.txn)
        if state is None:
            return  # decision already made; Decide is on its way
        if isinstance(msg, PrepareFail):
            state["failed"] = True
            self._gather.pop(msg.txn, None)
            state["fut"].resolve(None)
            return
        shard = next(s for s in state["pending"]
                     if self.topo.leader_node(s) == src)
        state["pending"].discard(shard)
        state["oks"][shard] = msg
        if not state["pending"]:
            state["fut"].resolve(None)

    # -- read-only handler ---------------------------------------------------

    def _ro_commit(self, src, msg: ROCommit):
        yield from self.log.safe_time_wait(msg.t_read)
        blocking, skippable = split_blocking(
            list(self.prepared.values()), msg.keys, msg.t_read, msg.t_min, self.mode)
        for rec in blocking:
            if not rec.decision_fut.done:
                yield rec.decision_fut
        versions = tuple(self.read_at(key, msg.t_read) for key in msg.keys)
        skipped = []
        for rec in skippable:
            carried = None
            if self.fastpath_writes:
                carried = tuple(sorted(set(msg.keys) & set(rec.writes)))
            skipped.append((rec.txn, rec.t_p, carried))
        self.sim.send(self.node, src,
                      ROFastReply(msg.ro, self.shard_id, tuple(skipped), versions))
        for rec in skippable:
            self.sim.spawn(self._slow_reply(src, msg.ro, msg.keys, rec),
                           f"{self.shard_id}:slow:{msg.ro}:{rec.txn}")

    def _slow_reply(self, client, ro: str, keys, rec: PreparedRecord):
        if rec.decision_fut.done:
            outcome, t_c = rec.decision_fut.value
        else:
            outcome, t_c = yield rec.decision_fut
        if outcome == COMMIT:
            touched = sorted(set(keys) & set(rec.writes))
            versions = tuple(Version(t_c, k, rec.txn) for k in touched)
            self.sim.send(self.node, client,
                          ROSlowReply(ro, self.shard_id, rec.txn, COMMIT, t_c, versions))
        else:
            self.sim.send(self.node, client,
                          ROSlowReply(ro, self.shard_id, rec.txn, ABORT, None, ()))


def choose_commit_ts(prepare_ts: list, floor: Timestamp) -> Timestamp:
    """Commit timestamp: >= every prepare timestamp, and at least the
    coordinator's floor (itself strictly above start time, local committed
    and prepared timestamps, the log tail, and TrueTime latest)."""
    if prepare_ts:
        return max(max(prepare_ts), floor)
    return floor
