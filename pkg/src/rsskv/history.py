"""History records: what the checker judges and what clients emit.

A history is a sequence of invocation/response events, one JSON object per
line. Values written by transactions are identified by the writer's
transaction id, so a read observation is just (key -> writer id); `None`
means the key's distinguished initial value. This makes the reads-from
relation resolvable by provenance with no value-matching heuristics.

Events may carry message-edge annotations: a respond event listing a message
id in ``sends`` causally precedes any invoke event listing the same id in
``recvs``. That is how out-of-band interactions between processes enter the
causal order.

``ok=False`` on a respond marks an aborted transaction. Aborted transactions
are complete (their response exists, keeping per-process histories
alternating) but contribute nothing durable, and checkers exclude them from
serialization search.

Extra protocol stamps (read/snapshot/commit timestamps) ride in ``meta`` for
run audits; consistency checking never looks at them.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

INVOKE = "invoke"
RESPOND = "respond"

RO = "ro"
RW = "rw"
FENCE = "fence"


@dataclass
class HistoryEvent:
    kind: str                  # invoke | respond
    txn: str
    proc: str
    svc: str
    ttype: str                 # ro | rw | fence
    t_us: int
    writes: dict | None = None  # key -> value id (writer txn id), on rw invoke
    reads: dict | None = None   # key -> observed writer id or None, on respond
    ok: bool = True
    sends: tuple = ()
    recvs: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {
            "kind": self.kind,
            "txn": self.txn,
            "proc": self.proc,
            "svc": self.svc,
            "type": self.ttype,
            "t": self.t_us,
        }
        if self.writes is not None:
            rec["writes"] = self.writes
        if self.reads is not None:
            rec["reads"] = self.reads
        if not self.ok:
            rec["ok"] = False
        if self.sends:
            rec["sends"] = list(self.sends)
        if self.recvs:
            rec["recvs"] = list(self.recvs)
        if self.meta:
            rec["meta"] = self.meta
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(line: str) -> "HistoryEvent":
        rec = json.loads(line)
        return HistoryEvent(
            kind=rec["kind"],
            txn=str(rec["txn"]),
            proc=str(rec["proc"]),
            svc=rec.get("svc", "kv"),
            ttype=rec["type"],
            t_us=int(rec["t"]),
            writes=rec.get("writes"),
            reads=rec.get("reads"),
            ok=rec.get("ok", True),
            sends=tuple(rec.get("sends", ())),
            recvs=tuple(rec.get("recvs", ())),
            meta=rec.get("meta", {}),
        )


def write_history(path: str, events) -> None:
    with open(path, "w") as f:
        for ev in events:
            f.write(ev.to_json() + "\n")


def read_history(path: str) -> list:
    with open(path) as f:
        return [HistoryEvent.from_json(line) for line in f if line.strip()]


class HistoryLog:
    """In-memory event collector, optionally sampling by process.

    Sampling keeps whole processes (never partial transactions) so any
    retained sub-history stays well-formed. rate=1 keeps everything."""

    def __init__(self, rate: int = 1):
        self.rate = max(1, rate)
        self.events: list[HistoryEvent] = []

    def keeps(self, proc: str) -> bool:
        if self.rate == 1:
            return True
        # crc32, not hash(): stable across interpreter runs
        return zlib.crc32(proc.encode()) % self.rate == 0

    def log(self, ev: HistoryEvent):
        if self.keeps(ev.proc):
            self.events.append(ev)
