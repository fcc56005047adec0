"""Command line runner.

    python -m np_aqm run <scenario-file> [--out DIR] [--event-log] [--snapshot-interval MS]
    python -m np_aqm compare <scenario-file> [--out DIR] [--jobs N]

Exit codes: 0 ok, 1 config error, 2 internal audit failure, 3 the
anaqm-beats-red predicate was false.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import combinations
from pathlib import Path
from typing import Optional

from np_aqm import metrics as m
from np_aqm.engine import SimulationError
from np_aqm.metrics import AuditError
from np_aqm.scenario import Scenario, load_scenario
from np_aqm.sim import Simulator
from np_aqm.traffic import ConfigError

log = logging.getLogger("np_aqm")

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_PREDICATE = 0, 1, 2, 3


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_one(scenario: Scenario, policy: str, out_dir: Optional[Path] = None,
            event_log: bool = False) -> dict:
    """Run one policy and write its artifacts; returns the JSON summary."""
    pdir = None
    if out_dir is not None:
        pdir = out_dir / policy
        pdir.mkdir(parents=True, exist_ok=True)
    log_fh = open(pdir / "events.log", "w") if (event_log and pdir) else None
    try:
        sim = Simulator(scenario, policy, event_log=log_fh)
        try:
            sim.run()
        except (SimulationError, AuditError) as e:
            summary = {"meta": {"policy": policy}, "error": str(e), "audit": {"ok": False}}
            if pdir:
                (pdir / "summary.json").write_text(dump_json(summary))
            return summary
    finally:
        if log_fh:
            log_fh.close()
    summary = sim.summary()
    summary["audit"]["ok"] = sim.audit.ok
    if pdir:
        (pdir / "summary.json").write_text(dump_json(summary))
        (pdir / "counters.csv").write_text(m.to_csv(sim.metrics))
        if sim.snapshots:
            with open(pdir / "snapshots.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("time_ns",) + tuple(sim.snapshots[0][1][0]))
                for t, rows in sim.snapshots:
                    for row in rows:
                        w.writerow((t,) + tuple("" if v is None else v for v in row.values()))
    return summary


def _mean_delay(summary: dict, cls: str):
    d = summary["classes"][cls]["delay_ns"]
    return None if d is None else d["mean"]


def _delta(a, b):
    return None if a is None or b is None else a - b


def compare_summaries(summaries: dict[str, dict]) -> dict:
    """Pairwise per-class deltas, pairs in sorted-name order, plus the
    anaqm-vs-red predicate when both were run."""
    pairs = {}
    for a, b in combinations(sorted(summaries), 2):
        sa, sb = summaries[a], summaries[b]
        pairs[f"{a}-{b}"] = {
            cls: {"loss_rate": _delta(sa["classes"][cls]["loss_rate"], sb["classes"][cls]["loss_rate"]),
                  "mean_delay_ns": _delta(_mean_delay(sa, cls), _mean_delay(sb, cls))}
            for cls in sa["classes"]}
    out = {"policies": sorted(summaries), "deltas": pairs,
           "arrival_hashes": {p: s["meta"].get("arrival_hash") for p, s in sorted(summaries.items())}}
    if "anaqm" in summaries and "red" in summaries:
        out["anaqm_beats_red"] = anaqm_beats_red(summaries["anaqm"], summaries["red"])
    return out


def anaqm_beats_red(anaqm: dict, red: dict) -> bool:
    ours = anaqm["classes"]["EF"]["loss_rate"]
    theirs = red["classes"]["EF"]["loss_rate"]
    return ours is not None and theirs is not None and ours < theirs


def _apply_flags(s: Scenario, args) -> Scenario:
    changes = {}
    if args.snapshot_interval is not None:
        changes["snapshot_interval_ms"] = args.snapshot_interval
    if args.event_log:
        changes["event_log"] = True
    return dataclasses.replace(s, **changes) if changes else s


def _run_all(s: Scenario, out: Path, jobs: int) -> dict[str, dict]:
    if jobs > 1 and len(s.policies) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = {p: ex.submit(run_one, s, p, out, s.event_log) for p in s.policies}
            return {p: f.result() for p, f in futs.items()}
    return {p: run_one(s, p, out, s.event_log) for p in s.policies}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="np_aqm", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in ("run", "compare"):
        p = sub.add_parser(name)
        p.add_argument("scenario")
        p.add_argument("--out", default=None, help="output directory (default: scenario output.dir)")
        p.add_argument("--event-log", action="store_true", help="write events.log per policy")
        p.add_argument("--snapshot-interval", type=int, default=None, metavar="MS",
                       help="record a status snapshot every MS milliseconds")
        p.add_argument("--policy", action="append", default=None,
                       help="override the scenario's policy list (repeatable)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        s = load_scenario(args.scenario)
        if args.policy:
            s = s.with_policies(*args.policy)
            s.validate()
        s = _apply_flags(s, args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.cmd == "compare" and len(s.policies) < 2:
        print("config error: policy: compare needs at least two policies", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or s.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = _run_all(s, out, args.jobs)
    for p, sm in summaries.items():
        log.info("%s: generated=%s fates=%s", p, sm.get("generated"), sm.get("fates"))
    if not all(sm["audit"].get("ok") for sm in summaries.values()):
        print("internal audit failed; partial outputs kept in", out, file=sys.stderr)
        return EXIT_AUDIT
    if args.cmd == "compare":
        report = compare_summaries(summaries)
        (out / "comparison.json").write_text(dump_json(report))
        print(dump_json(report), end="")
        if report.get("anaqm_beats_red") is False:
            return EXIT_PREDICATE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
