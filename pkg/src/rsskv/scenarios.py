"""Scripted litmus scenarios with adversarially chosen topologies.

These scripts pin keys to shards and stretch specific network legs so that
the interesting protocol windows are wide enough to hit deterministically
across seeds (jitter only ever lengthens a leg, so minimum leg times bound
the windows from below):

  * figure-4 execution: a writer commits across two shards through a slow
    coordinator-to-participant link while its client sits behind a slow
    outcome leg. A first reader observes the write at the coordinator shard
    while the decision is still in flight to the participant; a second,
    causally unrelated reader then reads the participant key. In rss mode
    the second read returns the old value immediately; in ss mode it blocks
    until the decision lands.

  * fence: a writer commits (the decision to the participant shard still in
    flight and its stored earliest-end-time far in the future), fences, and
    then signals an independent reader out of band, with no context
    propagation. The reader's read must observe the write. A variant has an
    observer read the slow writer's data and signal; without the fence the
    signaled reader usually misses the write (legal for the store itself,
    which is exactly why cross-client signaling needs the fence).

  * composition: two independent store instances with disjoint keys. Two
    writers commit slowly, one per service. Two reader processes each
    observe one writer quickly (via the coordinator-side key) and then read
    only the participant-side key at the other service, skipping the
    still-prepared writer there. Merged, the four reads form a causal cycle
    and the history is not rss. With the meta-library enabled, the fence
    injected at each service switch delays the second reads until the
    writers' earliest end times have passed, so they observe the writes and
    the merged history is rss again.
"""

from __future__ import annotations

from dataclasses import dataclass

from .audit import RunAudit
from .client import ClientRuntime, KVService
from .history import FENCE, HistoryEvent, INVOKE, RESPOND, RO, RW, HistoryLog
from .librss import ServiceRegistry
from .replication import ReplicatedLog
from .shard import MODE_RSS, ShardServer
from .simnet import LatencyMatrix, Simulation
from .timebase import TrueTimeConfig
from .topology import ShardInfo, Topology

EPS_US = 10_000


def figure4_history() -> list:
    """Hand-built litmus: writer concurrent with two reads; the first read
    observes the write, the later (real-time after it) does not."""
    w, r1, r2 = "w.1", "r1.1", "r2.1"
    return [
        HistoryEvent(INVOKE, w, "pw", "kv", RW, 0, writes={"x": w, "y": w}),
        HistoryEvent(INVOKE, r1, "p1", "kv", RO, 100_000),
        HistoryEvent(RESPOND, r1, "p1", "kv", RO, 200_000, reads={"x": w}),
        HistoryEvent(INVOKE, r2, "p2", "kv", RO, 300_000),
        HistoryEvent(RESPOND, r2, "p2", "kv", RO, 400_000, reads={"y": None}),
        HistoryEvent(RESPOND, w, "pw", "kv", RW, 900_000, reads={}),
    ]


@dataclass
class _ServiceSpec:
    name: str
    shards: dict     # shard_id -> (leader_region, keys...)


def _build(sim: Simulation, clock: TrueTimeConfig, spec: _ServiceSpec,
           mode: str, history: HistoryLog, audit: RunAudit | None,
           fence_l_us: int) -> KVService:
    infos, placement = {}, {}
    for gid, (region, *keys) in sorted(spec.shards.items()):
        infos[gid] = ShardInfo(gid, f"n:{gid}", region, ())
        for key in keys:
            placement[key] = gid
    topo = Topology(sim.latency, clock, infos, placement)
    for gid, info in sorted(infos.items()):
        sim.add_node(info.leader_node, info.leader_region)
        log = ReplicatedLog(sim, gid, info.leader_node, [])
        ShardServer(sim, topo, gid, log, mode=mode, audit=audit)
    return KVService(sim, topo, name=spec.name, fence_l_us=fence_l_us,
                     history=history, audit=audit)


# -- figure 4 end to end -----------------------------------------------------

# The coordinator-to-participant leg is stretched so prepared records
# linger; the writer-to-coordinator leg is slightly shorter than
# writer-to-participant so the RC shard strictly wins coordinator choice.
FIG4_MATRIX = LatencyMatrix.from_rows(
    ["RC", "RP", "RW", "RR"],
    [
        # coordinator shard, participant shard, writer client, readers
        [0.2, 300.0, 380.0, 20.0],
        [300.0, 0.2, 400.0, 20.0],
        [380.0, 400.0, 0.2, 400.0],
        [20.0, 20.0, 400.0, 0.2],
    ],
)


def figure4_sim(mode: str, seed: int) -> dict:
    """Run the figure-4 script; returns both reads and the recorded history."""
    sim = Simulation(seed, FIG4_MATRIX, jitter_fraction=0.05)
    clock = TrueTimeConfig(EPS_US)
    history = HistoryLog()
    audit = RunAudit(l_us=None, epsilon_us=EPS_US)
    svc = _build(sim, clock, _ServiceSpec("kv", {
        "gC": ("RC", "a"),
        "gP": ("RP", "b"),
    }), mode, history, audit, fence_l_us=2_000_000)

    out: dict = {}

    def writer():
        rt = ClientRuntime(sim, "c:w", "RW")
        session = svc.session(rt, "pw")
        result = yield from svc.rw(session, (), ("a", "b"))
        out["w"] = result

    def readers():
        # First reader: observe the write at the coordinator shard while the
        # decision is still travelling to the participant.
        rt1 = ClientRuntime(sim, "c:r1", "RR")
        s1 = svc.session(rt1, "p1")
        r1 = yield from svc.ro(s1, ("a",))
        out["r1"] = r1["a"]
        yield 5_000
        rt2 = ClientRuntime(sim, "c:r2", "RR")
        s2 = svc.session(rt2, "p2")
        began = sim.now_us
        r2 = yield from svc.ro(s2, ("b",))
        out["r2"] = r2["b"]
        out["r2_latency_us"] = sim.now_us - began

    sim.spawn(writer(), "writer")
    # after the coordinator decides (<= ~515ms with jitter) but well before
    # the decision reaches the participant (>= 640ms) or t_ee (680ms) passes
    sim.schedule(530_000, lambda: sim.spawn(readers(), "readers"))
    sim.run()
    out["events"] = history.events
    out["writer_txn"] = "pw.1"
    return out


# -- fence scenarios ---------------------------------------------------------

FENCE_MATRIX = FIG4_MATRIX


def fence_scenario(seed: int, use_fence: bool = True) -> dict:
    """Writer commits, fences, signals an independent reader out of band.

    L is tight (100 ms) so the fence usually releases while the decision is
    still in flight to the participant shard: the reader's observation then
    goes through the forced-wait path rather than a committed version."""
    sim = Simulation(seed, FENCE_MATRIX, jitter_fraction=0.05)
    clock = TrueTimeConfig(EPS_US)
    history = HistoryLog()
    audit = RunAudit(l_us=100_000, epsilon_us=EPS_US)
    svc = _build(sim, clock, _ServiceSpec("kv", {
        "gC": ("RC", "kc"),
        "gP": ("RP", "kp"),
    }), MODE_RSS, history, audit, fence_l_us=100_000)

    out: dict = {}

    def writer():
        rt = ClientRuntime(sim, "c:w", "RR")  # near the shards: fast commit
        session = svc.session(rt, "pw")
        result = yield from svc.rw(session, (), ("kc", "kp"))
        out["w"] = result
        if use_fence:
            yield from svc.fence(session, sends=("m1",))
        # out-of-band signal: start the reader now, no context handed over
        sim.spawn(reader(), "reader")

    def reader():
        rt = ClientRuntime(sim, "c:r", "RR")
        session = svc.session(rt, "pr")
        r = yield from svc.ro(session, ("kp",), recvs=("m1",) if use_fence else ())
        out["read"] = r["kp"]

    sim.spawn(writer(), "writer")
    sim.run()
    out["events"] = history.events
    out["writer_txn"] = "pw.1"
    out["tee_violations"] = list(audit.tee_violations)
    return out


def fence_observer_scenario(seed: int, use_fence: bool) -> dict:
    """Observer reads a slow concurrent writer's data and signals a fresh
    reader. With the fence the reader always sees the write; without it the
    reader races the writer's earliest end time and usually misses."""
    sim = Simulation(seed, FENCE_MATRIX, jitter_fraction=0.05)
    clock = TrueTimeConfig(EPS_US)
    history = HistoryLog()
    # L must cover this topology's t_ee - t_c (~180ms for the slow writer)
    svc = _build(sim, clock, _ServiceSpec("kv", {
        "gC": ("RC", "kc"),
        "gP": ("RP", "kp"),
    }), MODE_RSS, history, None, fence_l_us=250_000)

    out: dict = {}

    def slow_writer():
        rt = ClientRuntime(sim, "c:w", "RW")  # slow outcome leg
        session = svc.session(rt, "pw")
        result = yield from svc.rw(session, (), ("kc", "kp"))
        out["w"] = result

    def observer():
        rt = ClientRuntime(sim, "c:o", "RR")
        session = svc.session(rt, "po")
        seen = yield from svc.ro(session, ("kc", "kp"))
        out["observer"] = {k: v.value for k, v in seen.items()}
        if use_fence:
            yield from svc.fence(session, sends=("m1",))
        sim.spawn(reader(), "reader")

    def reader():
        rt = ClientRuntime(sim, "c:r", "RR")
        session = svc.session(rt, "pr")
        r = yield from svc.ro(session, ("kp",), recvs=("m1",) if use_fence else ())
        out["read"] = r["kp"]

    sim.spawn(slow_writer(), "writer")
    # after the slow writer's coordinator decision, before its t_ee passes
    sim.schedule(540_000, lambda: sim.spawn(observer(), "observer"))
    sim.run()
    out["events"] = history.events
    out["writer_txn"] = "pw.1"
    return out


# -- composition -------------------------------------------------------------

# writers sit slightly nearer the coordinator region than the participant
# region, so the coordinator-side shard strictly wins coordinator choice
COMPOSITION_MATRIX = LatencyMatrix.from_rows(
    ["R_CO", "R_PA", "R_RD", "R_WR"],
    [
        # coordinators, participants, readers, writers
        [0.2, 600.0, 20.0, 780.0],
        [600.0, 0.2, 20.0, 800.0],
        [20.0, 20.0, 0.2, 800.0],
        [780.0, 800.0, 800.0, 0.2],
    ],
)


def composition_scenario(seed: int, librss_enabled: bool) -> dict:
    """Two independent store instances, two writers, two reader processes
    that cross service boundaries in opposite orders."""
    sim = Simulation(seed, COMPOSITION_MATRIX, jitter_fraction=0.05)
    clock = TrueTimeConfig(EPS_US)
    history = HistoryLog()
    fence_l_us = 1_500_000 + 2 * EPS_US  # above any t_ee - t_c in this topology
    svc_a = _build(sim, clock, _ServiceSpec("A", {
        "gA1": ("R_PA", "xP"),
        "gA2": ("R_CO", "xC"),
    }), MODE_RSS, history, None, fence_l_us)
    svc_b = _build(sim, clock, _ServiceSpec("B", {
        "gB1": ("R_PA", "yP"),
        "gB2": ("R_CO", "yC"),
    }), MODE_RSS, history, None, fence_l_us)

    out: dict = {}

    def writer(svc, label, keys):
        def task():
            rt = ClientRuntime(sim, f"c:{label}", "R_WR")
            session = svc.session(rt, label)
            result = yield from svc.rw(session, (), keys)
            out[label] = result
        return task

    def reader(label, first, second):
        # first = (service, keys to observe), second = (service, keys to skip)
        def task():
            rt = ClientRuntime(sim, f"c:{label}", "R_RD")
            sessions = {
                svc_a.name: svc_a.session(rt, label, label + "a"),
                svc_b.name: svc_b.session(rt, label, label + "b"),
            }
            services = {svc_a.name: svc_a, svc_b.name: svc_b}
            registry = ServiceRegistry()
            for name, svc in services.items():
                registry.register_service(
                    name, lambda svc=svc, name=name: svc.fence(sessions[name]))
            results = {}
            for svc_name, keys in (first, second):
                if librss_enabled:
                    yield from registry.start_transaction(svc_name)
                got = yield from services[svc_name].ro(sessions[svc_name], keys)
                results.update({k: v.value for k, v in got.items()})
            out[label] = results
        return task

    sim.spawn(writer(svc_a, "wa", ("xP", "xC"))(), "writer-a")
    sim.spawn(writer(svc_b, "wb", ("yP", "yC"))(), "writer-b")
    start = 1_150_000
    sim.schedule(start, lambda: sim.spawn(
        reader("p1", ("A", ("xP", "xC")), ("B", ("yP",)))(), "reader-1"))
    sim.schedule(start, lambda: sim.spawn(
        reader("p2", ("B", ("yP", "yC")), ("A", ("xP",)))(), "reader-2"))
    sim.run()
    out["events"] = history.events
    return out
