"""Retwis-style workload over Zipf-distributed keys, with client models.

Transaction mix (add-user 5%, follow 15%, post-tweet 30%, load-timeline
50%): the first three are read-write, the last is read-only. Per-transaction
key counts are conventions chosen to mimic the Retwis data model and to
produce multi-shard read-write transactions: add-user blind-writes 1 key,
follow read-modifies 2, post-tweet read-modifies 3, load-timeline reads 10.

Key popularity follows a bounded Zipf distribution, P(rank r) proportional
to 1/r^theta, sampled by rejection inversion so any theta in [0, 1] works
with no table precomputation.

Two client models drive sessions:

  * partly-open: sessions arrive per region as a Poisson process at the
    configured aggregate rate; after each transaction a session continues
    with probability p (after think time H) and otherwise ends. p=0.9 gives
    geometric sessions of mean length 10. p=0 makes every transaction its
    own session, which removes completion feedback from the schedule — the
    load is then identical across protocol modes, which the parity checks
    rely on.
  * closed: a fixed number of sessions that never end, each issuing its
    next transaction as soon as the previous completes.

Every session owns a fresh client session (its own t_min) and a dedicated
rng stream keyed by session id, so the sequence of transactions a session
issues is a function of the seed alone, not of timing. Aborted read-write
attempts retry with fresh timestamps up to a limit; each attempt is a new
transaction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .client import ClientRuntime, KVService
from .simnet import Simulation

ADD_USER = "add_user"
FOLLOW = "follow"
POST_TWEET = "post_tweet"
LOAD_TIMELINE = "load_timeline"

DEFAULT_MIX = ((ADD_USER, 0.05), (FOLLOW, 0.15), (POST_TWEET, 0.30),
               (LOAD_TIMELINE, 0.50))

# kind -> (reads_also_written, writes_only, ro_reads)
SHAPES = {
    ADD_USER: (0, 1, 0),
    FOLLOW: (2, 0, 0),
    POST_TWEET: (3, 0, 0),
    LOAD_TIMELINE: (0, 0, 10),
}


class ZipfSampler:
    """Bounded Zipf via rejection inversion (Hormann-Derflinger).

    Valid for any theta >= 0 including the harmonic point theta=1;
    theta=0 short-circuits to uniform."""

    def __init__(self, num_keys: int, theta: float):
        if num_keys < 1:
            raise ValueError("num_keys must be >= 1")
        if theta < 0:
            raise ValueError("theta must be >= 0")
        self.n = num_keys
        self.theta = theta
        if theta > 0:
            self._h_x1 = self._h_integral(1.5) - 1.0
            self._h_n = self._h_integral(num_keys + 0.5)
            self._s = 2.0 - self._h_integral_inverse(
                self._h_integral(2.5) - self._h(2.0))

    def _h_integral(self, x: float) -> float:
        logx = math.log(x)
        return _helper2((1.0 - self.theta) * logx) * logx

    def _h(self, x: float) -> float:
        return math.exp(-self.theta * math.log(x))

    def _h_integral_inverse(self, x: float) -> float:
        t = x * (1.0 - self.theta)
        if t < -1.0:
            t = -1.0
        return math.exp(_helper1(t) * x)

    def sample(self, rng) -> int:
        """0-based key rank."""
        if self.theta == 0.0:
            return rng.randrange(self.n)
        while True:
            u = self._h_n + rng.random() * (self._h_x1 - self._h_n)
            x = self._h_integral_inverse(u)
            k = int(x + 0.5)
            if k < 1:
                k = 1
            elif k > self.n:
                k = self.n
            if k - x <= self._s or u >= self._h_integral(k + 0.5) - self._h(k):
                return k - 1


def _helper1(x: float) -> float:
    """log1p(x)/x, continuous at 0."""
    return math.log1p(x) / x if abs(x) > 1e-8 else 1.0 - x / 2.0 + x * x / 3.0


def _helper2(x: float) -> float:
    """expm1(x)/x, continuous at 0."""
    return math.expm1(x) / x if abs(x) > 1e-8 else 1.0 + x / 2.0 + x * x / 6.0


@dataclass(frozen=True)
class TxnPlan:
    kind: str
    read_keys: tuple
    write_keys: tuple

    @property
    def readonly(self) -> bool:
        return not self.write_keys


def draw_kind(rng, mix=DEFAULT_MIX) -> str:
    u = rng.random()
    acc = 0.0
    for kind, frac in mix:
        acc += frac
        if u < acc:
            return kind
    return mix[-1][0]


def draw_txn(rng, sampler: ZipfSampler, mix=DEFAULT_MIX) -> TxnPlan:
    kind = draw_kind(rng, mix)
    rmw, blind, ro = SHAPES[kind]
    want = rmw + blind + ro
    want = min(want, sampler.n)
    chosen: list = []
    seen = set()
    while len(chosen) < want:
        k = sampler.sample(rng)
        if k not in seen:
            seen.add(k)
            chosen.append(k)
    keys = tuple(f"k{k}" for k in sorted(chosen))
    if ro:
        return TxnPlan(kind, keys, ())
    if blind and not rmw:
        return TxnPlan(kind, (), keys)
    return TxnPlan(kind, keys, keys)


@dataclass
class WorkloadConfig:
    num_keys: int = 10_000
    skew: float = 0.9
    mix: tuple = DEFAULT_MIX
    client_model: str = "partly-open"  # or "closed"
    arrival_rate: float = 20.0         # sessions/s, partly-open, all regions
    stay_prob: float = 0.9
    think_us: int = 0
    closed_clients: int = 3
    duration_us: int = 10_000_000
    max_txns: int | None = None
    retry_limit: int = 10

    def __post_init__(self):
        total = sum(f for _, f in self.mix)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix must sum to 1, got {total}")
        if not 0.0 <= self.stay_prob < 1.0:
            raise ValueError("stay probability must be in [0, 1)")


@dataclass
class RunStats:
    samples: dict = field(default_factory=dict)   # kind -> [latency_us]
    aborts: dict = field(default_factory=dict)    # kind -> count
    commits: dict = field(default_factory=dict)   # kind -> count
    tee_wait_us: int = 0

    def record_commit(self, kind: str, latency_us: int):
        self.samples.setdefault(kind, []).append(latency_us)
        self.commits[kind] = self.commits.get(kind, 0) + 1

    def record_abort(self, kind: str):
        self.aborts[kind] = self.aborts.get(kind, 0) + 1

    def ro_samples(self) -> list:
        return [s for kind in sorted(self.samples) if SHAPES[kind][2]
                for s in self.samples[kind]]

    def rw_samples(self) -> list:
        return [s for kind in sorted(self.samples) if not SHAPES[kind][2]
                for s in self.samples[kind]]


class WorkloadDriver:
    """Schedules sessions onto the simulation and records latencies."""

    def __init__(self, sim: Simulation, service: KVService, cfg: WorkloadConfig,
                 stats: RunStats | None = None):
        self.sim = sim
        self.service = service
        self.cfg = cfg
        self.stats = stats or RunStats()
        self.sampler = ZipfSampler(cfg.num_keys, cfg.skew)
        self.regions = service.topo.matrix.regions
        self._session_seq = 0
        self._txns_issued = 0

    def start(self):
        if self.cfg.client_model == "closed":
            for i in range(self.cfg.closed_clients):
                region = self.regions[i % len(self.regions)]
                self._spawn_session(region, endless=True)
        else:
            for region in self.regions:
                self.sim.spawn(self._arrivals(region), f"arrivals:{region}")

    def _arrivals(self, region: str):
        rng = self.sim.rng_stream(f"arrivals:{region}")
        rate = self.cfg.arrival_rate / len(self.regions)
        while True:
            yield rng.expovariate(rate) * 1_000_000
            if self._done():
                return
            self._spawn_session(region, endless=False)

    def _done(self) -> bool:
        if self.sim.now_us >= self.cfg.duration_us:
            return True
        if self.cfg.max_txns is not None and self._txns_issued >= self.cfg.max_txns:
            return True
        return False

    def _spawn_session(self, region: str, endless: bool):
        self._session_seq += 1
        sid = f"s{self._session_seq}"
        runtime = ClientRuntime(self.sim, f"c:{sid}", region)
        session = self.service.session(runtime, sid)
        self.sim.spawn(self._session(session, endless), f"session:{sid}")

    def _session(self, session, endless: bool):
        rng = self.sim.rng_stream(f"sess:{session.sid}")
        while True:
            if self._done():
                return
            plan = draw_txn(rng, self.sampler, self.cfg.mix)
            yield from self._run_txn(session, plan)
            if endless:
                continue
            if rng.random() >= self.cfg.stay_prob:
                return
            if self.cfg.think_us:
                yield self.cfg.think_us

    def _run_txn(self, session, plan: TxnPlan):
        began = self.sim.now_us
        if plan.readonly:
            self._txns_issued += 1
            yield from self.service.ro(session, plan.read_keys)
            self.stats.record_commit(plan.kind, self.sim.now_us - began)
            return
        for _ in range(self.cfg.retry_limit):
            if self.cfg.max_txns is not None and self._txns_issued >= self.cfg.max_txns:
                return
            self._txns_issued += 1
            attempt_began = self.sim.now_us
            result = yield from self.service.rw(session, plan.read_keys,
                                                plan.write_keys)
            if result.committed:
                self.stats.record_commit(plan.kind, self.sim.now_us - attempt_began)
                return
            self.stats.record_abort(plan.kind)
        return
