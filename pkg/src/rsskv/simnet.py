"""Deterministic discrete-event simulation: clock, timers, channels, coroutines.

One `Simulation` owns simulated time. Everything that happens is an event on
a single heap ordered by (fire_at, seq); seq is a monotone insertion counter,
so same-instant events run in the order they were scheduled. Given the same
seed, config, and workload schedule, the full event trace is identical run to
run — protocol code must draw randomness only from streams derived from the
simulation's seed (`rng_stream`) and must never iterate unordered sets on any
path that schedules events.

Protocol code is written as plain Python generators ("tasks"). A task yields:

  * an ``int``/``float`` n  -> resume after n microseconds
  * a ``Future``            -> resume with its value once resolved

and may ``return`` a value, which resolves the task's own completion future.
Resolving a future never runs waiters inline; they are scheduled as fresh
events at the current instant, behind anything already queued. That keeps
re-entrancy out of handler code entirely: the loop is single-threaded and a
handler always runs to completion.

Messages travel on point-to-point channels. One-way delay is RTT/2 between
the endpoint regions plus uniform jitter in [0, jitter_fraction * RTT/2],
drawn from a per-channel stream. Delivery times are clamped to be
non-decreasing per channel, which (with seq ordering) gives per-channel FIFO
— the ordered-channel assumption the protocols rely on. No loss, no
duplication: the evaluation regime is failure-free.

If the heap drains while tasks are still blocked on futures before the run
condition is met, that is a deadlock in the modeled protocol; the error names
every blocked waiter and what it was waiting for.
"""

from __future__ import annotations

import heapq
import random
from collections import Counter
from dataclasses import dataclass, field


class DeadlockError(RuntimeError):
    """Event queue empty while tasks still wait; message lists the waiters."""


class ConfigError(ValueError):
    pass


@dataclass
class LatencyMatrix:
    """Symmetric region-to-region round-trip times, milliseconds."""

    regions: list
    rtt_ms: dict  # (region, region) -> float, both orders present

    def __post_init__(self):
        for a in self.regions:
            for b in self.regions:
                v = self.rtt_ms.get((a, b))
                if v is None:
                    raise ConfigError(f"missing rtt entry {a}-{b}")
                if v <= 0:
                    raise ConfigError(f"rtt {a}-{b} must be > 0, got {v}")
                if self.rtt_ms.get((b, a)) != v:
                    raise ConfigError(f"rtt not symmetric at {a}-{b}")

    def rtt_us(self, a: str, b: str) -> int:
        return int(round(self.rtt_ms[(a, b)] * 1000))

    def one_way_us(self, a: str, b: str) -> int:
        return self.rtt_us(a, b) // 2

    @staticmethod
    def from_rows(regions, rows):
        rtt = {}
        for i, a in enumerate(regions):
            for j, b in enumerate(regions):
                rtt[(a, b)] = float(rows[i][j])
        return LatencyMatrix(list(regions), rtt)

    @staticmethod
    def load(path: str) -> "LatencyMatrix":
        """Plain-text table: header row of region names, then one numeric
        row of RTT milliseconds per region (full symmetric matrix)."""
        with open(path) as f:
            lines = [ln.split() for ln in f if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise ConfigError(f"empty latency matrix file: {path}")
        regions = lines[0]
        rows = lines[1 : 1 + len(regions)]
        if len(rows) != len(regions) or any(len(r) != len(regions) for r in rows):
            raise ConfigError(f"latency matrix must be {len(regions)}x{len(regions)}")
        return LatencyMatrix.from_rows(regions, rows)

    def dump(self, path: str):
        with open(path, "w") as f:
            f.write(" ".join(self.regions) + "\n")
            for a in self.regions:
                f.write(" ".join(str(self.rtt_ms[(a, b)]) for b in self.regions) + "\n")


def default_latency_matrix() -> LatencyMatrix:
    """Three-region wide-area setup: CA, VA, IR.

    Cross-region RTTs 62/136/68 ms; intra-region 0.2 ms.
    """
    return LatencyMatrix.from_rows(
        ["CA", "VA", "IR"],
        [
            [0.2, 62.0, 136.0],
            [62.0, 0.2, 68.0],
            [136.0, 68.0, 0.2],
        ],
    )


class Future:
    """Single-assignment cell tasks can wait on."""

    __slots__ = ("sim", "label", "done", "value", "_waiters")

    def __init__(self, sim: "Simulation", label: str = "?"):
        self.sim = sim
        self.label = label
        self.done = False
        self.value = None
        self._waiters = []

    def resolve(self, value=None):
        if self.done:
            raise RuntimeError(f"future {self.label} resolved twice")
        self.done = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for task in waiters:
            self.sim._pending_futures.pop(id(task), None)
            self.sim.schedule(0, self.sim._step, task, value)

    def __repr__(self):
        state = "done" if self.done else "pending"
        return f"<Future {self.label} {state}>"


@dataclass(order=True)
class _Event:
    fire_at: int
    seq: int
    fn: object = field(compare=False)
    args: tuple = field(compare=False)
    cancelled: bool = field(compare=False, default=False)


class Timer:
    __slots__ = ("_event",)

    def __init__(self, event: _Event):
        self._event = event

    def cancel(self):
        self._event.cancelled = True


class _Task:
    __slots__ = ("gen", "label", "done")

    def __init__(self, gen, label: str, done: Future):
        self.gen = gen
        self.label = label
        self.done = done


class Simulation:
    def __init__(self, seed: int, latency: LatencyMatrix | None = None,
                 jitter_fraction: float = 0.05):
        self.seed = seed
        self.latency = latency or default_latency_matrix()
        self.jitter_fraction = jitter_fraction
        self.now_us = 0
        self._heap: list[_Event] = []
        self._seq = 0
        self._master_rng = random.Random(seed)
        self._streams: dict[str, random.Random] = {}
        self._nodes: dict[str, tuple[str, object]] = {}  # node -> (region, handler)
        self._chan_last: dict[tuple[str, str], int] = {}
        self._pending_futures: dict[int, tuple[object, Future]] = {}
        self.msg_counts: Counter = Counter()
        self.msg_observer = None  # optional fn(src, dst, msg), for audits

    # -- randomness ------------------------------------------------------

    def rng_stream(self, name: str) -> random.Random:
        """Named generator derived from the run seed; creation order-free."""
        rng = self._streams.get(name)
        if rng is None:
            rng = random.Random(f"{self.seed}/{name}")
            self._streams[name] = rng
        return rng

    # -- nodes & messages ------------------------------------------------

    def add_node(self, node_id: str, region: str, handler=None):
        if node_id in self._nodes:
            raise ConfigError(f"duplicate node id {node_id}")
        if region not in self.latency.regions:
            raise ConfigError(f"unknown region {region} for node {node_id}")
        self._nodes[node_id] = (region, handler)

    def set_handler(self, node_id: str, handler):
        region, _ = self._nodes[node_id]
        self._nodes[node_id] = (region, handler)

    def region_of(self, node_id: str) -> str:
        try:
            return self._nodes[node_id][0]
        except KeyError:
            raise ConfigError(f"unknown node {node_id}") from None

    def send(self, src: str, dst: str, msg) -> int:
        """Schedule delivery of msg on the (src, dst) FIFO channel.

        Returns the delivery time (µs)."""
        if src not in self._nodes:
            raise ConfigError(f"unknown source node {src}")
        if dst not in self._nodes:
            raise ConfigError(f"unknown destination node {dst}")
        base = self.latency.one_way_us(self.region_of(src), self.region_of(dst))
        jitter = 0
        if self.jitter_fraction > 0:
            rng = self.rng_stream(f"chan:{src}->{dst}")
            jitter = int(rng.uniform(0, self.jitter_fraction * base))
        chan = (src, dst)
        at = max(self.now_us + base + jitter, self._chan_last.get(chan, 0))
        self._chan_last[chan] = at
        self.msg_counts[type(msg).__name__] += 1
        if self.msg_observer is not None:
            self.msg_observer(src, dst, msg)
        self._push(at, self._deliver, (src, dst, msg))
        return at

    def _deliver(self, src, dst, msg):
        _, handler = self._nodes[dst]
        if handler is None:
            raise ConfigError(f"node {dst} has no handler")
        handler(src, msg)

    # -- timers & events -------------------------------------------------

    def _push(self, at: int, fn, args) -> _Event:
        ev = _Event(at, self._seq, fn, args)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def schedule(self, delay_us, fn, *args) -> Timer:
        """Run fn(*args) after delay_us; delay 0 runs behind queued events."""
        if delay_us < 0:
            raise ConfigError("negative delay")
        return Timer(self._push(self.now_us + int(delay_us), fn, args))

    # -- tasks (coroutines) ----------------------------------------------

    def future(self, label: str = "?") -> Future:
        return Future(self, label)

    def spawn(self, gen, label: str = "task") -> Future:
        """Run a generator as a task; returned future resolves with its
        return value."""
        task = _Task(gen, label, Future(self, f"{label}:done"))
        self.schedule(0, self._step, task, None)
        return task.done

    def _step(self, task: "_Task", send_value):
        while True:
            try:
                yielded = task.gen.send(send_value)
            except StopIteration as stop:
                task.done.resolve(stop.value)
                return
            if isinstance(yielded, Future):
                if yielded.done:
                    send_value = yielded.value
                    continue
                yielded._waiters.append(task)
                self._pending_futures[id(task)] = (task, yielded)
                return
            if isinstance(yielded, (int, float)):
                if yielded < 0:
                    raise RuntimeError("task yielded negative sleep")
                self.schedule(yielded, self._step, task, None)
                return
            raise RuntimeError(f"task yielded unsupported value {yielded!r}")

    # -- main loop ---------------------------------------------------------

    def run(self, until_us: int | None = None, until=None) -> int:
        """Pop events in (fire_at, seq) order until the horizon/condition.

        ``until`` is an optional zero-argument predicate checked between
        events. With neither bound, runs until the queue drains."""
        while True:
            if until is not None and until():
                return self.now_us
            while self._heap and self._heap[0].cancelled:
                heapq.heappop(self._heap)
            if not self._heap:
                if until is not None and not until():
                    self._report_deadlock("run condition unmet")
                if until is None and until_us is None and self._pending_futures:
                    self._report_deadlock("event queue drained")
                if until_us is not None and until_us > self.now_us:
                    self.now_us = until_us
                return self.now_us
            if until_us is not None and self._heap[0].fire_at > until_us:
                self.now_us = until_us
                return self.now_us
            ev = heapq.heappop(self._heap)
            assert ev.fire_at >= self.now_us, "time went backwards"
            self.now_us = ev.fire_at
            ev.fn(*ev.args)

    def _report_deadlock(self, why: str):
        waiters = [
            f"{task.label} waiting on {fut.label}"
            for task, fut in self._pending_futures.values()
        ]
        raise DeadlockError(
            f"deadlock at t={self.now_us}us ({why}); blocked waiters:\n  "
            + ("\n  ".join(sorted(waiters)) if waiters else "(none)")
        )
