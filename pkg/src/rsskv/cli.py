"""Experiment runner and checker front end.

``run`` wires config -> simulation -> history/summary:
build the wide-area topology (shard leaders round-robin over the placement
regions, followers in the next regions over), drive the configured workload
to its horizon, drain in-flight transactions, then validate runtime
invariants and write artifacts:

  history.log   one JSON event per line in checker format
  summary.csv   txn_type,count,p50_ms,p90_ms,p99_ms,p999_ms,aborts
  summary.json  the same plus p99.95, message counts per type, invariant
                audit results, and the config echo

Runs are deterministic: same config and seed give byte-identical history
files. ``check`` reads a history file and reports the verdict for one model
(exit 0 accept, 1 reject, 2 unknown/over cap).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, asdict

from . import checker
from .audit import RunAudit
from .client import KVService
from .history import HistoryLog, read_history, write_history
from .replication import ReplicatedLog
from .shard import MODE_RSS, MODE_SS, ShardServer
from .simnet import LatencyMatrix, Simulation, default_latency_matrix
from .timebase import TrueTimeConfig
from .topology import ShardInfo, Topology
from .workload import RunStats, WorkloadConfig, WorkloadDriver

DEFAULT_PLACEMENT = ("CA", "VA", "IR")


@dataclass
class RunConfig:
    mode: str = MODE_RSS
    seed: int = 1
    shards: int = 3
    replicas_per_shard: int = 3
    leader_placement: tuple = DEFAULT_PLACEMENT
    matrix: LatencyMatrix = field(default_factory=default_latency_matrix)
    epsilon_us: int = 10_000
    jitter_fraction: float = 0.05
    fence_l_us: int | None = None  # None: derived from the commit cost model
    lease_enabled: bool = True
    fastpath_writes: bool = True
    tee_adjust: bool = True
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    history_enabled: bool = True
    history_sample: int = 1
    check_policy: str = "none"  # none | full-small
    check_cap: int = 12
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in (MODE_SS, MODE_RSS):
            raise ValueError(f"mode must be ss or rss, got {self.mode!r}")


@dataclass
class World:
    sim: Simulation
    topo: Topology
    service: KVService
    servers: list
    history: HistoryLog | None
    audit: RunAudit


def default_fence_l_us(topo: Topology) -> int:
    """Generous bound on how far a stored t_ee can run past t_c: the commit
    wait (2 eps) plus the largest commit estimate any client could stamp."""
    all_shards = sorted(topo.shards)
    worst = max(topo.choose_coordinator(region, all_shards)[1]
                for region in topo.matrix.regions)
    return 2 * topo.clock.epsilon_us + worst


def build_world(cfg: RunConfig) -> World:
    sim = Simulation(cfg.seed, cfg.matrix, cfg.jitter_fraction)
    regions = cfg.matrix.regions
    clock = TrueTimeConfig(cfg.epsilon_us)

    shards = {}
    for i in range(cfg.shards):
        gid = f"g{i}"
        leader_region = cfg.leader_placement[i % len(cfg.leader_placement)]
        pool = [r for r in regions if r != leader_region] or [leader_region]
        followers = tuple(pool[(i + j) % len(pool)]
                          for j in range(cfg.replicas_per_shard - 1))
        shards[gid] = ShardInfo(gid, f"n:{gid}", leader_region, followers)
    topo = Topology(cfg.matrix, clock, shards)

    audit = RunAudit(l_us=cfg.fence_l_us, epsilon_us=cfg.epsilon_us)
    if audit.l_us is None:
        audit.l_us = default_fence_l_us(topo)

    servers = []
    for gid, info in sorted(shards.items()):
        sim.add_node(info.leader_node, info.leader_region)
        follower_nodes = []
        for j, fregion in enumerate(info.follower_regions):
            fnode = f"{info.leader_node}.f{j}"
            sim.add_node(fnode, fregion)
            follower_nodes.append(fnode)
        log = ReplicatedLog(sim, gid, info.leader_node, follower_nodes,
                            lease_enabled=cfg.lease_enabled)
        servers.append(ShardServer(sim, topo, gid, log, mode=cfg.mode,
                                   fastpath_writes=cfg.fastpath_writes,
                                   tee_adjust=cfg.tee_adjust, audit=audit))

    history = HistoryLog(cfg.history_sample) if cfg.history_enabled else None
    service = KVService(sim, topo, name="kv", fence_l_us=audit.l_us,
                        history=history, audit=audit)
    return World(sim, topo, service, servers, history, audit)


@dataclass
class RunResult:
    config: RunConfig
    stats: RunStats
    events: list
    msg_counts: dict
    audit_problems: list
    summary_rows: list
    verdict: checker.Verdict | None = None
    final_us: int = 0
    max_tee_past_tc_us: int = 0


def merged_stores(servers) -> dict:
    """svc -> key -> committed version list (keys are shard-partitioned)."""
    merged: dict = {}
    for server in servers:
        for key, versions in server.store.items():
            merged.setdefault(key, [])
            assert not merged[key], f"key {key} on two shards"
            merged[key] = list(versions)
    return {"kv": merged}


def run_experiment(cfg: RunConfig) -> RunResult:
    world = build_world(cfg)
    stats = RunStats()
    driver = WorkloadDriver(world.sim, world.service, cfg.workload, stats)
    driver.start()
    final_us = world.sim.run()

    problems = world.audit.validate(merged_stores(world.servers))
    events = world.history.events if world.history else []
    rows = summarize(stats)
    result = RunResult(cfg, stats, events, dict(world.sim.msg_counts),
                       problems, rows, final_us=final_us,
                       max_tee_past_tc_us=world.audit.max_tee_past_tc_us)

    if cfg.check_policy == "full-small":
        result.verdict = checker.check(events, cfg.mode, cap_txns=cfg.check_cap)

    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        write_history(os.path.join(cfg.out_dir, "history.log"), events)
        write_summary_csv(os.path.join(cfg.out_dir, "summary.csv"), rows)
        with open(os.path.join(cfg.out_dir, "summary.json"), "w") as f:
            json.dump(summary_json(result), f, indent=2, sort_keys=True)
    return result


def nearest_rank(sorted_samples: list, q: float):
    """Nearest-rank percentile; no interpolation."""
    n = len(sorted_samples)
    if n == 0:
        return None
    rank = max(1, math.ceil(q / 100.0 * n))
    return sorted_samples[rank - 1]


PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.95)


def summarize(stats: RunStats) -> list:
    """Per-type latency rows; types with no samples are omitted."""
    rows = []
    groups = dict(sorted(stats.samples.items()))
    groups["all_ro"] = stats.ro_samples()
    groups["all_rw"] = stats.rw_samples()
    for kind, samples in groups.items():
        if not samples:
            continue
        ordered = sorted(samples)
        row = {"txn_type": kind, "count": len(ordered)}
        for q in PERCENTILES:
            row[f"p{q:g}".replace(".", "")] = nearest_rank(ordered, q) / 1000.0
        if kind == "all_rw":
            row["aborts"] = sum(stats.aborts.values())
        else:
            row["aborts"] = stats.aborts.get(kind, 0)
        rows.append(row)
    return rows


CSV_HEADER = "txn_type,count,p50_ms,p90_ms,p99_ms,p999_ms,aborts"


def write_summary_csv(path: str, rows: list):
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in rows:
            f.write(f"{r['txn_type']},{r['count']},{r['p50']:.3f},{r['p90']:.3f},"
                    f"{r['p99']:.3f},{r['p999']:.3f},{r['aborts']}\n")


def summary_json(result: RunResult) -> dict:
    cfg = result.config
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "final_sim_us": result.final_us,
        "rows": result.summary_rows,
        "message_counts": dict(sorted(result.msg_counts.items())),
        "audit_problems": result.audit_problems,
        "max_tee_past_tc_us": result.max_tee_past_tc_us,
        "workload": asdict(cfg.workload) | {"mix": [list(m) for m in cfg.workload.mix]},
    }


# -- command line -----------------------------------------------------------

def _add_run_parser(sub):
    p = sub.add_parser("run", help="run one simulated experiment")
    p.add_argument("--mode", choices=[MODE_SS, MODE_RSS], default=MODE_RSS)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--shards", type=int, default=3)
    p.add_argument("--replicas-per-shard", type=int, default=3)
    p.add_argument("--leader-placement", default="CA,VA,IR",
                   help="comma-separated regions, round-robin over shards")
    p.add_argument("--latency-matrix", default=None,
                   help="path to a matrix file; default is the built-in 3-region table")
    p.add_argument("--tt-epsilon-us", type=int, default=10_000)
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--fence-l-us", type=int, default=None)
    p.add_argument("--no-lease", action="store_true")
    p.add_argument("--no-fastpath-writes", action="store_true")
    p.add_argument("--no-tee-adjust", action="store_true")
    p.add_argument("--skew", type=float, default=0.9)
    p.add_argument("--num-keys", type=int, default=10_000)
    p.add_argument("--client-model", choices=["partly-open", "closed"],
                   default="partly-open")
    p.add_argument("--lambda", dest="arrival_rate", type=float, default=20.0,
                   help="session arrival rate, sessions/s across all regions")
    p.add_argument("--stay-prob", type=float, default=0.9)
    p.add_argument("--think-ms", type=float, default=0.0)
    p.add_argument("--closed-clients", type=int, default=3)
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--max-txns", type=int, default=None)
    p.add_argument("--no-history", action="store_true")
    p.add_argument("--history-sample", type=int, default=1)
    p.add_argument("--check", choices=["none", "full-small"], default="none")
    p.add_argument("--check-cap", type=int, default=12)


def config_from_args(args) -> RunConfig:
    matrix = (LatencyMatrix.load(args.latency_matrix)
              if args.latency_matrix else default_latency_matrix())
    wl = WorkloadConfig(
        num_keys=args.num_keys,
        skew=args.skew,
        client_model=args.client_model,
        arrival_rate=args.arrival_rate,
        stay_prob=args.stay_prob,
        think_us=int(args.think_ms * 1000),
        closed_clients=args.closed_clients,
        duration_us=int(args.duration_s * 1_000_000),
        max_txns=args.max_txns,
    )
    return RunConfig(
        mode=args.mode,
        seed=args.seed,
        shards=args.shards,
        replicas_per_shard=args.replicas_per_shard,
        leader_placement=tuple(args.leader_placement.split(",")),
        matrix=matrix,
        epsilon_us=args.tt_epsilon_us,
        jitter_fraction=args.jitter,
        fence_l_us=args.fence_l_us,
        lease_enabled=not args.no_lease,
        fastpath_writes=not args.no_fastpath_writes,
        tee_adjust=not args.no_tee_adjust,
        workload=wl,
        history_enabled=not args.no_history,
        history_sample=args.history_sample,
        check_policy=args.check,
        check_cap=args.check_cap,
        out_dir=args.out_dir,
    )


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    result = run_experiment(cfg)
    print(f"mode={cfg.mode} seed={cfg.seed} sim_end={result.final_us / 1e6:.3f}s")
    print(CSV_HEADER)
    for r in result.summary_rows:
        print(f"{r['txn_type']},{r['count']},{r['p50']:.3f},{r['p90']:.3f},"
              f"{r['p99']:.3f},{r['p999']:.3f},{r['aborts']}")
    if result.audit_problems:
        print(f"AUDIT: {len(result.audit_problems)} invariant violations",
              file=sys.stderr)
        for p in result.audit_problems[:20]:
            print(f"  {p}", file=sys.stderr)
        return 1
    if result.verdict is not None:
        print(f"check[{cfg.mode}]: {result.verdict.status} {result.verdict.note}")
        if not result.verdict.accepted:
            return 1
    return 0


def cmd_check(args) -> int:
    events = read_history(args.input)
    verdict = checker.check(events, args.model, cap_txns=args.cap,
                            cap_seconds=args.cap_seconds)
    print(f"{verdict.status} model={args.model} note={verdict.note!r}")
    if verdict.accepted and args.witness:
        print("witness:", " ".join(verdict.witness))
    return {checker.ACCEPT: 0, checker.REJECT: 1, checker.UNKNOWN: 2}[verdict.status]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rsskv",
        description="simulated sharded KV with ss/rss read-only transactions")
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_run_parser(sub)
    c = sub.add_parser("check", help="check a history file against a model")
    c.add_argument("--model", choices=list(checker.MODELS), required=True)
    c.add_argument("--input", required=True)
    c.add_argument("--cap", type=int, default=12)
    c.add_argument("--cap-seconds", type=float, default=5.0)
    c.add_argument("--witness", action="store_true")
    args = parser.parse_args(argv)
    if args.cmd == "run":
        return cmd_run(args)
    return cmd_check(args)


if __name__ == "__main__":
    sys.exit(main())
