"""History verification for rss, ss, and rsc.

The checker reconstructs transactions from an event history, derives the
relations the consistency definitions quantify over, and searches for a
witness serialization:

  * causal order: transitive closure of process order (event order within a
    process), message edges (a respond whose ``sends`` names a message id
    precedes any invoke whose ``recvs`` names it), and reads-from (resolved
    purely by writer-id provenance — written values are unique by
    construction, so there is no value-matching ambiguity).
  * real-time order: respond strictly before invoke in recorded sim time;
    equal times are concurrent.
  * conflicts: a read-only transaction conflicts with a read-write
    transaction that writes any key it reads, whatever value it observed.

Accept criteria per model, on top of sequential legality and per-process
equivalence:

  ss   every real-time-ordered pair is ordered the same way.
  rss  causal order is respected, and a completed read-write transaction
       precedes every read-write transaction and every conflicting read-only
       transaction that follows it in real time.
  rsc  the per-operation analogue of rss: transactions are exploded into
       single-key read and write operations (sharing their parent's
       invoke/respond events) and the rss rule is applied with writes in the
       role of read-write transactions. Meant for litmus histories built
       from single-operation transactions.

Aborted transactions are dropped (they contribute nothing durable).
Incomplete read-write transactions are kept — extended with a hypothetical
commit response — only when some read observed their writes; unobserved
incomplete transactions are dropped. Fences are dropped from the search but
contribute their causal edges first.

The search is depth-first over ready sets with legality pruning and
memoization on (remaining set, committed-prefix store state). A search that
exceeds its transaction or time cap returns UNKNOWN, which is distinct from
reject. Every accept is re-validated against the model constraints and a
sequential replay, independently of the search bookkeeping; `naive_check`
(full permutation enumeration) is the reference oracle the pruned search is
tested against.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import permutations

from .history import FENCE, HistoryEvent, INVOKE, RESPOND, RO, RW

ACCEPT = "accept"
REJECT = "reject"
UNKNOWN = "unknown"

MODELS = ("rss", "ss", "rsc")


class MalformedHistoryError(ValueError):
    pass


class CorruptHistoryError(ValueError):
    pass


@dataclass
class Txn:
    id: str
    proc: str
    svc: str
    ttype: str
    invoke_us: int
    invoke_idx: int
    respond_us: int | None = None
    respond_idx: int | None = None
    ok: bool = True
    writes: dict = field(default_factory=dict)  # key -> value id
    reads: dict = field(default_factory=dict)   # key -> value id | None
    sends: tuple = ()
    recvs: tuple = ()

    @property
    def complete(self) -> bool:
        return self.respond_idx is not None


@dataclass
class RelationSet:
    causal: set        # txn-id pairs, transitively closed, irreflexive
    realtime: set      # txn-id pairs (respond strictly before invoke)
    proc_order: set    # txn-id pairs within a process (subset of causal)
    conflicts: dict    # rw txn id -> set of conflicting ro txn ids


@dataclass
class Verdict:
    status: str
    witness: list | None = None
    note: str = ""

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPT


def parse_transactions(events: list) -> list:
    """Reconstruct transactions; enforce history well-formedness."""
    txns: dict[str, Txn] = {}
    outstanding: dict[str, str] = {}  # proc -> txn id with pending respond
    for idx, ev in enumerate(events):
        if ev.kind == INVOKE:
            if ev.txn in txns:
                raise MalformedHistoryError(f"duplicate invoke for {ev.txn}")
            pending = outstanding.get(ev.proc)
            if pending is not None:
                raise MalformedHistoryError(
                    f"process {ev.proc} invoked {ev.txn} with {pending} outstanding")
            txns[ev.txn] = Txn(ev.txn, ev.proc, ev.svc, ev.ttype, ev.t_us, idx,
                               writes=dict(ev.writes or {}), recvs=ev.recvs)
            outstanding[ev.proc] = ev.txn
        elif ev.kind == RESPOND:
            t = txns.get(ev.txn)
            if t is None or t.complete:
                raise MalformedHistoryError(f"respond without open invoke: {ev.txn}")
            if t.proc != ev.proc:
                raise MalformedHistoryError(f"respond for {ev.txn} on wrong process")
            t.respond_us = ev.t_us
            t.respond_idx = idx
            t.ok = ev.ok
            t.reads = dict(ev.reads or {})
            t.sends = ev.sends
            outstanding.pop(ev.proc, None)
        else:
            raise MalformedHistoryError(f"unknown event kind {ev.kind!r}")
    return list(txns.values())


def explode_ops(txns: list) -> list:
    """Per-operation units for rsc: one unit per single-key read or write."""
    ops = []
    for t in txns:
        if t.ttype == FENCE:
            ops.append(t)
            continue
        for key in sorted(t.writes):
            ops.append(Txn(f"{t.id}#w:{key}", t.proc, t.svc, RW,
                           t.invoke_us, t.invoke_idx, t.respond_us, t.respond_idx,
                           t.ok, writes={key: t.writes[key]},
                           sends=t.sends, recvs=t.recvs))
        for key in sorted(t.reads):
            ops.append(Txn(f"{t.id}#r:{key}", t.proc, t.svc, RO,
                           t.invoke_us, t.invoke_idx, t.respond_us, t.respond_idx,
                           t.ok, reads={key: t.reads[key]},
                           sends=t.sends, recvs=t.recvs))
    return ops


def _writer_index(txns: list) -> dict:
    index = {}
    for t in txns:
        if not t.ok:
            continue
        for key, vid in t.writes.items():
            index[(key, vid)] = t.id
    return index


def derive_relations_txns(txns: list) -> RelationSet:
    writers = _writer_index(txns)
    direct: set = set()
    proc_order: set = set()

    by_proc: dict[str, list] = {}
    for t in txns:
        by_proc.setdefault(t.proc, []).append(t)
    for seq in by_proc.values():
        seq.sort(key=lambda t: t.invoke_idx)
        for i, a in enumerate(seq):
            if a.respond_idx is None:
                continue
            for b in seq[i + 1:]:
                if a.respond_idx < b.invoke_idx:
                    proc_order.add((a.id, b.id))
    direct |= proc_order

    send_of: dict[str, list] = {}
    for t in txns:
        for m in t.sends:
            send_of.setdefault(m, []).append(t.id)
    for t in txns:
        for m in t.recvs:
            for sender in send_of.get(m, ()):
                if sender != t.id:
                    direct.add((sender, t.id))

    for t in txns:
        if not t.ok:
            continue
        for key, vid in t.reads.items():
            if vid is None:
                continue
            writer = writers.get((key, vid))
            if writer is None:
                raise CorruptHistoryError(
                    f"{t.id} read {key}={vid} from no known committed writer")
            if writer != t.id:
                direct.add((writer, t.id))

    causal = _transitive_closure(direct)
    for a, b in causal:
        if a == b:
            raise CorruptHistoryError(f"causal cycle through {a}")

    realtime = set()
    for a in txns:
        if a.respond_us is None:
            continue
        for b in txns:
            if a.id != b.id and a.respond_us < b.invoke_us:
                realtime.add((a.id, b.id))

    conflicts: dict[str, set] = {}
    ros = [t for t in txns if t.ttype == RO and t.ok]
    for w in txns:
        if w.ttype != RW or not w.ok:
            continue
        wset = set(w.writes)
        hit = {r.id for r in ros if wset.intersection(r.reads)}
        if hit:
            conflicts[w.id] = hit
    return RelationSet(causal, realtime, proc_order, conflicts)


def derive_relations(events: list) -> RelationSet:
    return derive_relations_txns(parse_transactions(events))


def _transitive_closure(pairs: set) -> set:
    succ: dict = {}
    for a, b in pairs:
        succ.setdefault(a, set()).add(b)
    closed = set()
    for start in succ:
        stack = list(succ[start])
        seen = set()
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            closed.add((start, node))
            stack.extend(succ.get(node, ()))
    return closed


def eligible_units(txns: list) -> list:
    """Transactions that participate in the serialization search."""
    observed = set()
    for t in txns:
        if not t.ok:
            continue
        for key, vid in t.reads.items():
            if vid is not None:
                observed.add(vid)
    units = []
    for t in txns:
        if t.ttype == FENCE or not t.ok:
            continue
        if not t.complete:
            if t.ttype == RW and any(v in observed for v in t.writes.values()):
                units.append(t)  # extended with a hypothetical commit response
            continue
        units.append(t)
    units.sort(key=lambda t: (t.invoke_idx, t.id))
    return units


def _constraint_edges(units: list, rels: RelationSet, rule: str) -> set:
    """Witness-order constraints as index pairs over `units`."""
    idx = {u.id: i for i, u in enumerate(units)}
    edges = set()

    def add(a, b):
        ia, ib = idx.get(a), idx.get(b)
        if ia is not None and ib is not None and ia != ib:
            edges.add((ia, ib))

    for a, b in rels.proc_order:
        add(a, b)
    writers = _writer_index(units)
    for u in units:
        for key, vid in u.reads.items():
            if vid is not None:
                w = writers.get((key, vid))
                if w is not None:
                    add(w, u.id)
    if rule == "ss":
        for a, b in rels.realtime:
            add(a, b)
    else:  # regular sequential rule
        for a, b in rels.causal:
            add(a, b)
        rws = {u.id for u in units if u.ttype == RW}
        for w in rws:
            targets = rws | rels.conflicts.get(w, set())
            for t in targets:
                if (w, t) in rels.realtime:
                    add(w, t)
    return edges


class _SearchTimeout(Exception):
    pass


_MISSING = object()


def _search_witness(units: list, edges: set, deadline: float):
    """Pruned DFS over ready sets; returns an order of unit ids or None."""
    n = len(units)
    preds = [0] * n
    for a, b in edges:
        preds[b] |= 1 << a
    store: dict = {}
    order: list = []
    memo: set = set()
    ticks = [0]

    def rec(remaining: int) -> bool:
        if remaining == 0:
            return True
        key = (remaining, tuple(sorted(store.items())))
        if key in memo:
            return False
        ticks[0] += 1
        if ticks[0] % 256 == 0 and time.monotonic() > deadline:
            raise _SearchTimeout
        for i in range(n):
            bit = 1 << i
            if not remaining & bit or preds[i] & remaining:
                continue
            u = units[i]
            if any(store.get(k) != vid for k, vid in u.reads.items()):
                continue
            saved = [(k, store.get(k, _MISSING)) for k in u.writes]
            store.update(u.writes)
            order.append(u.id)
            if rec(remaining & ~bit):
                return True
            order.pop()
            for k, old in saved:
                if old is _MISSING:
                    del store[k]
                else:
                    store[k] = old
        memo.add(key)
        return False

    if rec((1 << n) - 1):
        return list(order)
    return None


def replay_legal(ordered_units: list) -> bool:
    """Replay against the sequential key-value specification: every read
    returns the most recent preceding write's value (initial if none)."""
    store: dict = {}
    for u in ordered_units:
        for key, vid in u.reads.items():
            if store.get(key) != vid:
                return False
        store.update(u.writes)
    return True


def validate_witness(units: list, edges: set, order_ids: list) -> bool:
    """Soundness re-check, independent of search bookkeeping."""
    idx = {u.id: i for i, u in enumerate(units)}
    if sorted(order_ids) != sorted(idx):
        return False
    pos = {uid: p for p, uid in enumerate(order_ids)}
    for a, b in edges:
        if pos[units[a].id] >= pos[units[b].id]:
            return False
    by_id = {u.id: u for u in units}
    return replay_legal([by_id[uid] for uid in order_ids])


def _prepare(events: list, model: str):
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    txns = parse_transactions(events)
    if model == "rsc":
        txns = explode_ops(txns)
    rels = derive_relations_txns(txns)
    units = eligible_units(txns)
    rule = "ss" if model == "ss" else "rss"
    edges = _constraint_edges(units, rels, rule)
    return units, edges


def check(events: list, model: str, cap_txns: int = 12,
          cap_seconds: float = 5.0) -> Verdict:
    units, edges = _prepare(events, model)
    if len(units) > cap_txns:
        return Verdict(UNKNOWN, note=f"{len(units)} units exceed cap {cap_txns}")
    deadline = time.monotonic() + cap_seconds
    try:
        order = _search_witness(units, edges, deadline)
    except _SearchTimeout:
        return Verdict(UNKNOWN, note=f"search exceeded {cap_seconds}s")
    if order is None:
        return Verdict(REJECT, note=f"no {model} serialization of "
                                    f"{len(units)} transactions exists")
    if not validate_witness(units, edges, order):
        raise AssertionError("search produced an invalid witness")
    return Verdict(ACCEPT, witness=order)


def naive_check(events: list, model: str) -> Verdict:
    """Full permutation enumeration; reference oracle for the pruned search."""
    units, edges = _prepare(events, model)
    n = len(units)
    for perm in permutations(range(n)):
        pos = [0] * n
        for p, i in enumerate(perm):
            pos[i] = p
        if any(pos[a] >= pos[b] for a, b in edges):
            continue
        if replay_legal([units[i] for i in perm]):
            return Verdict(ACCEPT, witness=[units[i].id for i in perm])
    return Verdict(REJECT, note="exhausted all permutations")
