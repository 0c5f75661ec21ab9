"""Command line interface.

    zeus bench <handovers|smallbank|tatp|voter> --nodes N --remote-frac F
               --seed S --txs T --out results.jsonl [--csv results.csv]
    zeus run   --config cluster.json --seed S --backend {sim,socket}
               [--trace-out trace.jsonl]
    zeus check --trace trace.jsonl --nodes N [--directory 0,1,2]
    zeus smallmodel --scenario {ownership,rcommit} [--mutant NAME] ...
"""

from __future__ import annotations

import argparse
import json
import sys

from . import bench
from .checker import ModelConfig, check_invariants, small_model_enumerate
from .net import FaultSchedule
from .node import ClusterConfig, SimCluster


def _wl(name: str, nodes: int, remote: float, seed: int):
    if name == "handovers":
        return bench.Handovers(nodes=nodes, remote_frac=remote, seed=seed)
    if name == "smallbank":
        return bench.Smallbank(nodes=nodes, remote_frac=remote, seed=seed)
    if name == "tatp":
        return bench.Tatp(nodes=nodes, remote_frac=remote, seed=seed)
    if name == "voter":
        return bench.Voter(nodes=nodes, seed=seed)
    raise SystemExit("unknown workload %r" % name)


def cmd_bench(args) -> int:
    wl = _wl(args.workload, args.nodes, args.remote_frac, args.seed)
    res = bench.run_workload(wl, args.txs, seed=args.seed,
                             nodes=args.nodes,
                             track_windows=args.window or 0)
    line = json.dumps({"record": "summary", **res}, default=str)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(line + "\n")
            for w in res.get("windows", []):
                fh.write(json.dumps({"record": "window", "window": w[0],
                                     "committed": w[1]}) + "\n")
    print(line)
    if args.csv and res.get("windows"):
        with open(args.csv, "w") as fh:
            fh.write("window,committed\n")
            for w, c in res["windows"]:
                fh.write("%d,%d\n" % (w, c))
    return 0 if not res["violations"] else 1


def cmd_run(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    if args.backend == "socket":
        from .socknode import SocketNode
        cfg = ClusterConfig(
            nodes=raw["nodes"], degree=raw.get("degree", 3),
            pipelines=raw.get("pipelines", 2),
            directory=tuple(raw.get("directory", (0, 1, 2))),
            seed=args.seed)
        addresses = {int(k): (v[0], int(v[1]))
                     for k, v in raw["addresses"].items()}
        node = SocketNode(raw["node_id"], addresses, cfg.validate())
        node.start()
        print("node %d listening on %s" % (raw["node_id"],
                                           addresses[raw["node_id"]]))
        try:
            while True:
                import time
                time.sleep(1)
        except KeyboardInterrupt:
            node.stop()
        return 0
    fault = FaultSchedule(seed=args.seed, **raw.get("fault", {}))
    cfg = ClusterConfig(
        nodes=raw["nodes"], degree=raw.get("degree", 3),
        pipelines=raw.get("pipelines", 2),
        directory=tuple(raw.get("directory", ()) or
                        range(min(3, raw["nodes"]))),
        lease=raw.get("lease", 50), latency=raw.get("latency", 1),
        seed=args.seed, fault=fault, hash_trace=True)
    wl_spec = raw.get("workload", {"name": "smallbank", "txs": 5000})
    wl = _wl(wl_spec.get("name", "smallbank"), raw["nodes"],
             wl_spec.get("remote_frac", 0.01), args.seed)
    cluster = SimCluster(cfg)
    if args.trace_out:
        fh = open(args.trace_out, "w")
        cluster.trace_to_file(fh)
        cluster.verifier.emit = cluster.trace_cb
    wl.populate(cluster)
    for target, desc in wl.generate(wl_spec.get("txs", 5000)):
        cluster.enqueue(target, desc)
    cluster.start_runners()
    cluster.run_to_quiescence()
    violations = cluster.final_check()
    out = {**cluster.stats(), "violations": violations,
           "trace_hash": cluster.trace_hash()}
    print(json.dumps(out, default=str))
    return 0 if not violations else 1


def cmd_check(args) -> int:
    directory = tuple(int(x) for x in args.directory.split(","))
    with open(args.trace) as fh:
        ok, report = check_invariants(fh, set(range(args.nodes)),
                                      directory)
    print(json.dumps({"ok": ok, **report}, default=str))
    return 0 if ok else 1


def cmd_smallmodel(args) -> int:
    cfg = ModelConfig(scenario=args.scenario, mutant=args.mutant,
                      requesters=tuple(int(x) for x in
                                       args.requesters.split(",")),
                      crash_candidates=tuple(
                          int(x) for x in args.crash.split(","))
                      if args.crash else (),
                      max_crashes=1 if args.crash else 0)
    report = small_model_enumerate(cfg)
    print(json.dumps({
        "states": report.states, "transitions": report.transitions,
        "complete": report.complete, "ok": report.ok,
        "violations": report.violations[:1],
        "deadlocks": report.deadlocks[:1],
        "elapsed": round(report.elapsed, 2)}, default=str))
    return 0 if report.ok else 1


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="zeus")
    sub = p.add_subparsers(dest="cmd", required=True)

    b = sub.add_parser("bench", help="run a benchmark workload")
    b.add_argument("workload",
                   choices=["handovers", "smallbank", "tatp", "voter"])
    b.add_argument("--nodes", type=int, default=3)
    b.add_argument("--remote-frac", type=float, default=0.01)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--txs", type=int, default=20000)
    b.add_argument("--window", type=int, default=0)
    b.add_argument("--out", default="")
    b.add_argument("--csv", default="")
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("run", help="run a node or simulated cluster")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--backend", choices=["sim", "socket"], default="sim")
    r.add_argument("--trace-out", default="")
    r.set_defaults(fn=cmd_run)

    c = sub.add_parser("check", help="check invariants over a trace file")
    c.add_argument("--trace", required=True)
    c.add_argument("--nodes", type=int, required=True)
    c.add_argument("--directory", default="0,1,2")
    c.set_defaults(fn=cmd_check)

    m = sub.add_parser("smallmodel", help="exhaustive small-model check")
    m.add_argument("--scenario", choices=["ownership", "rcommit"],
                   default="ownership")
    m.add_argument("--mutant", default="")
    m.add_argument("--requesters", default="4")
    m.add_argument("--crash", default="")
    m.set_defaults(fn=cmd_smallmodel)

    args = p.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
