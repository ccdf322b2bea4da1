"""Emulated TrueTime and the waiting primitives built on it.

Simulated time is a plain integer count of microseconds owned by the event
loop. Protocol stamps (prepare, commit, read, snapshot, minimum-read) are
composite `Timestamp` values: microseconds plus a (node, seq) tiebreak that
makes the order strictly total without physical-time collisions.

TrueTime here is an interval oracle over *simulated* time: `tt_now` returns
[now - eps, now + eps], so the true simulated instant always lies inside the
interval. eps is global and constant for a run (real deployments report a
p99.9 bound; we treat that bound as exact). Near the epoch the earliest edge
clamps at 0, so the interval width invariant (2*eps) intentionally bends
there: absolute epoch is arbitrary and negative times buy nothing.

Waiting primitives are written as coroutines for the event loop (they yield
a sleep duration), never wall-clock loops:

  * ``wait_until_earliest_after(t)`` returns once tt_now().earliest > t.
  * ``commit_wait(t_c)`` is the same wait applied to a commit timestamp: when
    it returns, t_c is definitely in the past for every clock in the system.

Integer-microsecond arithmetic makes both exact: earliest(now) > t first
holds at now = t + eps + 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple


class Timestamp(NamedTuple):
    """Composite, totally ordered protocol timestamp."""

    us: int
    node: int = 0
    seq: int = 0

    def tick(self) -> "Timestamp":
        """Smallest timestamp we ever hand out above this one."""
        return Timestamp(self.us, self.node, self.seq + 1)

    def shift_us(self, delta_us: int) -> "Timestamp":
        return Timestamp(self.us + delta_us, self.node, self.seq)


TS_ZERO = Timestamp(0, 0, 0)


def above(*stamps: Timestamp) -> Timestamp:
    """A timestamp strictly greater than every argument."""
    assert stamps
    return max(stamps).tick()


class TrueTimeInterval(NamedTuple):
    earliest_us: int
    latest_us: int


@dataclass(frozen=True)
class TrueTimeConfig:
    epsilon_us: int = 10_000

    def __post_init__(self):
        if self.epsilon_us < 0:
            raise ValueError("epsilon_us must be >= 0")


def tt_now(clock: TrueTimeConfig, sim_time_us: int) -> TrueTimeInterval:
    """Interval guaranteed to contain the true simulated instant."""
    return TrueTimeInterval(
        max(0, sim_time_us - clock.epsilon_us),
        sim_time_us + clock.epsilon_us,
    )


def wait_until_earliest_after(clock: TrueTimeConfig, sim, t_us: int):
    """Coroutine: resume once tt_now().earliest > t_us; returns release time.

    Release happens at the first integer microsecond where now - eps > t_us,
    i.e. t_us + eps + 1. Immediate (no event) if that is already past.
    """
    target = t_us + clock.epsilon_us + 1
    if target > sim.now_us:
        yield target - sim.now_us
    return sim.now_us


def commit_wait(clock: TrueTimeConfig, sim, t_c: Timestamp):
    """Coroutine: block until t_c is guaranteed to be in the past.

    A transaction's completion must not be visible to any client until every
    clock agrees its commit timestamp has passed; this pins the commit
    timestamp inside the transaction's real start/end window.
    """
    released_at = yield from wait_until_earliest_after(clock, sim, t_c.us)
    return released_at
