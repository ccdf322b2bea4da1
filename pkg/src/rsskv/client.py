"""Client-side transaction library: RW commit path, RO snapshot reads, fences.

Sessions are the unit of client state. A session has at most one outstanding
transaction, owns a monotone minimum read timestamp ``t_min`` (the causal
floor every later read-only transaction must respect), and maps one-to-one
to a process in emitted histories.

Read-write path: execute reads under read locks (wound-wait may abort us;
retries are the caller's job and count as fresh transactions), buffer
writes, then commit via the participant whose coordination minimizes the
estimated commit latency. The commit request carries the transaction's
earliest possible end time ``t_ee`` = TrueTime earliest + that same minimum
estimate; shards keep it while the transaction is prepared so readers can
prove the transaction could not have finished before they began. After the
outcome the client performs commit wait and also waits out the final t_ee
(participants blocked by wound-wait push it forward), so the stamp is never
in the transaction's future when the transaction is visible.

Read-only path: stamp t_read = TrueTime latest, fan ROCommit out to the
shards covering the key set, and merge fast replies. The snapshot timestamp
is the earliest time for which a value is known for every key (max over
keys of the min commit timestamp returned for that key). While any still-
prepared transaction reported by a shard has t_p at or below that snapshot,
the result is not yet a closed cut and the client consumes slow replies,
folding in writes that commit at or below the snapshot. Pending records are
keyed per (transaction, shard): every shard that skipped the record sends
its own slow reply, and each carries that shard's keys.

A fence makes the session's causal past visible to everyone: it blocks
until t_min + L is definitely in the past, where L bounds how far any
transaction's stored t_ee may run past its commit timestamp. After that, no
read anywhere can skip a write at or below t_min.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .history import FENCE, INVOKE, RESPOND, RO, RW, HistoryEvent
from .shard import (ABORT, COMMIT, AbortTxn, CommitTxn, ROCommit, ROFastReply,
                    ROSlowReply, RwRead, RwReadReply, TxnOutcome, Version,
                    Wounded)
from .simnet import Simulation
from .timebase import TS_ZERO, Timestamp, commit_wait, tt_now, wait_until_earliest_after
from .topology import Topology

WAIT = "wait"


class ProtocolError(RuntimeError):
    pass


class PendingSkip(NamedTuple):
    t_p: Timestamp
    carried: tuple | None  # keys whose writes rode the fast path, or None


# -- pure pieces of the RO client algorithm ---------------------------------

def calculate_snapshot_ts(keys, vmap: dict) -> Timestamp:
    """Earliest timestamp with a value for every key: max over keys of the
    minimum commit timestamp among that key's returned versions."""
    t_snap = TS_ZERO
    for key in keys:
        versions = vmap.get(key)
        if not versions:
            raise ProtocolError(f"no version returned for key {key}")
        t_snap = max(t_snap, min(versions))
    return t_snap


def check_snapshot(pending: dict, t_snap: Timestamp) -> str:
    """WAIT iff some pending prepared record has t_p <= t_snap."""
    if pending and min(p.t_p for p in pending.values()) <= t_snap:
        return WAIT
    return COMMIT


def update_prepared(pending: dict, vmap: dict, shard: str, txn: str,
                    decision: str, t_c, versions, t_snap: Timestamp):
    """Resolve one (txn, shard) pending entry with its decision.

    Commits at or below the snapshot fold their writes into the read set;
    later commits and aborts change nothing. Unknown entries are ignored
    (duplicate slow reply) but commit versions still merge — another shard
    may have resolved the pair first while this shard's keys are new."""
    pending.pop((txn, shard), None)
    if decision == COMMIT and t_c is not None and t_c <= t_snap:
        for v in versions:
            vmap.setdefault(v.key, {})[v.t_c] = v


def read_at_timestamp(vmap: dict, t: Timestamp, keys) -> dict:
    """Per key, the version with the greatest t_c <= t."""
    out = {}
    for key in keys:
        eligible = [ts for ts in vmap[key] if ts <= t]
        if not eligible:
            raise ProtocolError(f"snapshot hole: no version of {key} at {t}")
        out[key] = vmap[key][max(eligible)]
    return out


# -- runtime: one per client node -------------------------------------------

class ClientRuntime:
    """Routes replies arriving at one client node to waiting tasks."""

    def __init__(self, sim: Simulation, node_id: str, region: str):
        self.sim = sim
        self.node = node_id
        self.region = region
        sim.add_node(node_id, region, self._handle)
        self.node_num = len(sim._nodes)
        self._read_futs: dict = {}
        self._outcome_futs: dict = {}
        self._wounded: set = set()
        self._fast: dict = {}
        self._slow: dict = {}

    def _handle(self, src, msg):
        if isinstance(msg, RwReadReply):
            fut = self._read_futs.pop((msg.txn, msg.key), None)
            if fut is not None:
                fut.resolve(msg)
        elif isinstance(msg, TxnOutcome):
            fut = self._outcome_futs.pop(msg.txn, None)
            if fut is not None:
                fut.resolve(msg)
        elif isinstance(msg, Wounded):
            self._wounded.add(msg.txn)
        elif isinstance(msg, ROFastReply):
            state = self._fast.get(msg.ro)
            if state is not None:
                state["replies"].append(msg)
                if len(state["replies"]) == state["need"]:
                    self._fast.pop(msg.ro)
                    state["fut"].resolve(state["replies"])
        elif isinstance(msg, ROSlowReply):
            state = self._slow.get(msg.ro)
            if state is not None:
                state["buf"].append(msg)
                waiter = state.pop("waiter", None)
                if waiter is not None:
                    waiter.resolve(None)
        else:
            raise RuntimeError(f"client got unexpected message {msg!r}")

    def wounded(self, txn: str) -> bool:
        return txn in self._wounded

    def await_read(self, txn, key):
        fut = self.sim.future(f"read-reply:{txn}:{key}")
        self._read_futs[(txn, key)] = fut
        return fut

    def await_outcome(self, txn):
        fut = self.sim.future(f"outcome:{txn}")
        self._outcome_futs[txn] = fut
        return fut

    def open_ro(self, ro, need):
        fut = self.sim.future(f"fast-replies:{ro}")
        self._fast[ro] = {"need": need, "replies": [], "fut": fut}
        self._slow[ro] = {"buf": []}
        return fut

    def next_slow(self, ro):
        """Coroutine: next buffered slow reply for this read."""
        state = self._slow[ro]
        while not state["buf"]:
            waiter = self.sim.future(f"slow-reply:{ro}")
            state["waiter"] = waiter
            yield waiter
        return state["buf"].pop(0)

    def close_ro(self, ro):
        self._fast.pop(ro, None)
        self._slow.pop(ro, None)  # later slow replies are dropped


@dataclass
class ClientSession:
    sid: str
    runtime: ClientRuntime
    service: str
    label: str | None = None  # txn id prefix when one process spans services
    t_min: Timestamp = TS_ZERO
    _counter: int = 0
    _stamp_seq: int = 0

    def next_txn_id(self) -> str:
        self._counter += 1
        return f"{self.label or self.sid}.{self._counter}"

    def stamp(self, us: int) -> Timestamp:
        self._stamp_seq += 1
        return Timestamp(us, self.runtime.node_num, self._stamp_seq)


@dataclass
class TxnResult:
    committed: bool
    t_c: Timestamp | None = None
    reads: dict = field(default_factory=dict)


class KVService:
    """Client library for one store instance (one service name)."""

    def __init__(self, sim: Simulation, topo: Topology, name: str = "kv",
                 fence_l_us: int = 0, history=None, audit=None):
        self.sim = sim
        self.topo = topo
        self.name = name
        self.clock = topo.clock
        self.fence_l_us = fence_l_us
        self.history = history
        self.audit = audit

    def session(self, runtime: ClientRuntime, sid: str,
                label: str | None = None) -> ClientSession:
        return ClientSession(sid, runtime, self.name, label)

    def _log(self, **kw):
        if self.history is not None:
            self.history.log(HistoryEvent(**kw))

    # -- read-write transactions ----------------------------------------

    def rw(self, session: ClientSession, read_keys, write_keys,
           sends=(), recvs=()):
        """Coroutine: one read-write transaction attempt."""
        rt = session.runtime
        txn = session.next_txn_id()
        invoke_us = self.sim.now_us
        start_ts = session.stamp(tt_now(self.clock, invoke_us).latest_us)
        write_keys = tuple(sorted(write_keys))
        read_keys = tuple(sorted(read_keys))
        writes = {k: txn for k in write_keys}
        self._log(kind=INVOKE, txn=txn, proc=session.sid, svc=self.name,
                  ttype=RW, t_us=invoke_us, writes=dict(writes), recvs=tuple(recvs))

        touched = self.topo.group_by_shard(set(read_keys) | set(write_keys))
        reads = {}
        aborted = False
        for key in read_keys:
            node = self.topo.leader_node(self.topo.shard_of(key))
            fut = rt.await_read(txn, key)
            self.sim.send(rt.node, node, RwRead(txn, key, start_ts))
            reply = yield fut
            if not reply.ok or rt.wounded(txn):
                aborted = True
                break
            reads[key] = reply.value
        if not aborted and rt.wounded(txn):
            aborted = True

        if aborted:
            for shard in touched:
                self.sim.send(rt.node, self.topo.leader_node(shard), AbortTxn(txn))
            self._log(kind=RESPOND, txn=txn, proc=session.sid, svc=self.name,
                      ttype=RW, t_us=self.sim.now_us, ok=False)
            return TxnResult(False)

        participants = sorted(touched)
        coord, est_us = self.topo.choose_coordinator(rt.region, participants)
        t_ee = session.stamp(tt_now(self.clock, self.sim.now_us).earliest_us + est_us)
        plan = tuple((shard, keys, tuple((k, writes[k]) for k in keys if k in writes))
                     for shard, keys in touched.items())
        outcome_fut = rt.await_outcome(txn)
        self.sim.send(rt.node, self.topo.leader_node(coord),
                      CommitTxn(txn, start_ts, t_ee, plan))
        outcome: TxnOutcome = yield outcome_fut

        if outcome.outcome != COMMIT:
            self._log(kind=RESPOND, txn=txn, proc=session.sid, svc=self.name,
                      ttype=RW, t_us=self.sim.now_us, ok=False)
            return TxnResult(False)

        t_c = outcome.t_c
        yield from commit_wait(self.clock, self.sim, t_c)
        yield from wait_until_earliest_after(self.clock, self.sim, outcome.t_ee.us)
        session.t_min = max(session.t_min, t_c)
        respond_us = self.sim.now_us
        self._log(kind=RESPOND, txn=txn, proc=session.sid, svc=self.name,
                  ttype=RW, t_us=respond_us, reads=dict(reads), sends=tuple(sends),
                  meta={"t_c": list(t_c)})
        if self.audit is not None:
            self.audit.on_rw(self.name, txn, invoke_us, respond_us, t_c,
                             writes, reads, start_ts)
        return TxnResult(True, t_c, reads)

    def rw_retrying(self, session, read_keys, write_keys, max_attempts=10):
        """Coroutine: retry aborted attempts with fresh timestamps."""
        for _ in range(max_attempts):
            result = yield from self.rw(session, read_keys, write_keys)
            if result.committed:
                return result
        return TxnResult(False)

    # -- read-only transactions ------------------------------------------

    def ro(self, session: ClientSession, keys, sends=(), recvs=()):
        """Coroutine: one read-only transaction; returns key -> Version."""
        rt = session.runtime
        ro_id = session.next_txn_id()
        invoke_us = self.sim.now_us
        t_read = session.stamp(tt_now(self.clock, invoke_us).latest_us)
        t_min_sent = session.t_min
        keys = tuple(sorted(set(keys)))
        self._log(kind=INVOKE, txn=ro_id, proc=session.sid, svc=self.name,
                  ttype=RO, t_us=invoke_us, recvs=tuple(recvs))

        groups = self.topo.group_by_shard(keys)
        fast_fut = rt.open_ro(ro_id, len(groups))
        for shard, shard_keys in groups.items():
            self.sim.send(rt.node, self.topo.leader_node(shard),
                          ROCommit(ro_id, shard_keys, t_read, t_min_sent))
        replies = yield fast_fut

        vmap: dict = {}
        pending: dict = {}
        for reply in replies:
            for v in reply.versions:
                vmap.setdefault(v.key, {})[v.t_c] = v
            for txn_i, t_p, carried in reply.skipped:
                pending[(txn_i, reply.shard)] = PendingSkip(t_p, carried)

        t_snap = calculate_snapshot_ts(keys, vmap)

        # Writes carried on the fast path settle immediately when some other
        # shard's reply already proves the writer committed.
        discovered = {}
        for versions in vmap.values():
            for v in versions.values():
                if v.value is not None:
                    discovered.setdefault(v.value, v.t_c)
        for (txn_i, shard), skip in sorted(pending.items()):
            t_ci = discovered.get(txn_i)
            if skip.carried is not None and t_ci is not None:
                update_prepared(pending, vmap, shard, txn_i, COMMIT, t_ci,
                                tuple(Version(t_ci, k, txn_i) for k in skip.carried),
                                t_snap)

        while check_snapshot(pending, t_snap) == WAIT:
            slow: ROSlowReply = yield from rt.next_slow(ro_id)
            update_prepared(pending, vmap, slow.shard, slow.txn, slow.decision,
                            slow.t_c, slow.versions, t_snap)
        rt.close_ro(ro_id)

        session.t_min = max(session.t_min, t_snap)
        result = read_at_timestamp(vmap, t_snap, keys)
        respond_us = self.sim.now_us
        self._log(kind=RESPOND, txn=ro_id, proc=session.sid, svc=self.name,
                  ttype=RO, t_us=respond_us,
                  reads={k: v.value for k, v in result.items()},
                  sends=tuple(sends),
                  meta={"t_read": list(t_read), "t_snap": list(t_snap)})
        if self.audit is not None:
            self.audit.on_ro(self.name, ro_id, invoke_us, respond_us,
                             t_read, t_snap, result)
        return result

    # -- real-time fence ----------------------------------------------------

    def fence(self, session: ClientSession, sends=(), recvs=()):
        """Coroutine: block until every read anywhere must see our past."""
        fid = session.next_txn_id()
        self._log(kind=INVOKE, txn=fid, proc=session.sid, svc=self.name,
                  ttype=FENCE, t_us=self.sim.now_us, recvs=tuple(recvs))
        yield from wait_until_earliest_after(
            self.clock, self.sim, session.t_min.us + self.fence_l_us)
        self._log(kind=RESPOND, txn=fid, proc=session.sid, svc=self.name,
                  ttype=FENCE, t_us=self.sim.now_us, sends=tuple(sends))
        return self.sim.now_us
