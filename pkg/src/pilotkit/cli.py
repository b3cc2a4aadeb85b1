"""Command line entry point.

    pilotkit run WORKLOAD [--resource NAME] [--session DIR] [--policy P] [--seed N] [--executors N]
    pilotkit status --session DIR [--json]
    pilotkit profile --session DIR {durations ID | concurrency STATE | utilization PILOT | summary}

Exit codes: 0 success, 1 task failures, 2 bad input or missing session,
3 resource errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import profiling
from .client import PilotManager, SchedulerPolicy, Session, UnitManager, new_session_id
from .ensemble import AppManager
from .exceptions import (CorruptRecord, IllegalHistory, NoSuchSession, PilotkitError, PilotNeverActive,
                         ResourceAcquisitionFailed, ResourceError, UnknownEntity, ValidationError)
from .resources import load_resource_config
from .states import UNIT, PilotState, UnitState
from .workload import WorkloadMode, load_workload

log = logging.getLogger("pilotkit.cli")

REPORT_SCHEMA = "pilotkit.report/1"
REPORT_FILE = "report.json"

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_INPUT = 2
EXIT_RESOURCE = 3


def _warn_corrupt(exc: CorruptRecord):
    print(f"warning: {exc}", file=sys.stderr)


def _resource(name, seed, config_dir=None):
    rc = load_resource_config(name, config_dir)
    if seed is not None and rc.batch is not None:
        rc = dataclasses.replace(rc, batch=dataclasses.replace(rc.batch, seed=seed))
    return rc


def _write_report(report: dict, session_dir: Path, path=None) -> Path:
    out = Path(path) if path else session_dir / REPORT_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out


def _run_units(wl, args, rc, session_dir: Path) -> tuple[dict, int]:
    opts = wl.options
    policy = SchedulerPolicy(str(args.policy or opts.get("policy", "ROUND_ROBIN")).upper())
    executors = args.executors or opts.get("executors")
    cuds = wl.unit_descriptions()
    pdesc = wl.pilot_description(rc.total_cores)
    if args.resource:
        pdesc = dataclasses.replace(pdesc, resource=rc.name)
    started = time.monotonic()
    active = set()
    with Session(session_dir, resources=[rc]) as session:
        pmgr = PilotManager(session, executors=executors)
        pmgr.register_callback(lambda p, s: active.add(p.id) if s is PilotState.ACTIVE else None)
        umgr = UnitManager(session, policy, stagers=int(opts.get("stagers", 1)))
        pilots = pmgr.submit_pilots(pdesc)
        umgr.add_pilots(pilots)
        done = [0]

        def progress(unit, state):
            if UNIT.is_terminal(state):
                done[0] += 1
                if done[0] % 100 == 0 or done[0] == len(cuds):
                    log.info("%d/%d units finished", done[0], len(cuds))

        umgr.register_callback(progress)
        umgr.submit_units(cuds)
        umgr.wait_units(timeout=opts.get("timeout"))
    units = {u.id: {"name": u.description.name, "state": u.state.value, "pilot": u.pilot_id,
                    "exit_code": u.exit_code, "error": u.error}
             for u in umgr.units.values()}
    counts: dict[str, int] = {}
    for u in units.values():
        counts[u["state"]] = counts.get(u["state"], 0) + 1
    report = {
        "schema": REPORT_SCHEMA,
        "mode": wl.mode.value,
        "session": session.id,
        "session_dir": str(session.path),
        "resource": rc.name,
        "pilots": {p.id: {"state": p.state.value, "error": p.error} for p in pilots},
        "units": units,
        "counts": dict(sorted(counts.items())),
        "wall_time": round(time.monotonic() - started, 3),
    }
    if any(p.state is PilotState.FAILED and p.id not in active for p in pilots):
        code = EXIT_RESOURCE
    elif counts.get(UnitState.FAILED.value):
        code = EXIT_FAILURES
    else:
        code = EXIT_OK
    return report, code


def _run_ensemble(wl, args, rc, session_dir: Path) -> tuple[dict, int]:
    opts = wl.options
    rd = dict(wl.resource_desc)
    rd["resource"] = rc.name
    rd.setdefault("cpus", rc.total_cores)
    rd.setdefault("walltime", 60)
    am = AppManager(resource_desc=rd, continue_on_failure=bool(opts.get("continue_on_failure", False)),
                    executors=args.executors or opts.get("executors"), resources=[rc])
    am.set_workflow(wl.workflow())
    code = EXIT_OK
    try:
        report = am.run(session=session_dir, timeout=opts.get("timeout"))
    except ResourceAcquisitionFailed:
        report, code = am.report, EXIT_RESOURCE
    except PilotkitError:
        report, code = am.report, EXIT_FAILURES
    report = dict(report, schema=REPORT_SCHEMA, mode=wl.mode.value, resource=rc.name)
    if code == EXIT_OK:
        failed = report["counts"].get("FAILED", 0)
        bad = [p for p in report["pipelines"].values() if p["state"] in ("FAILED", "CANCELED")]
        if failed or bad:
            code = EXIT_FAILURES
    return report, code


def cmd_run(args) -> int:
    try:
        wl = load_workload(args.workload)
    except ValidationError as exc:
        print(f"error: invalid workload: {exc}", file=sys.stderr)
        return EXIT_INPUT
    session_dir = Path(args.session) if args.session else Path.cwd() / new_session_id()
    try:
        rc = _resource(args.resource or wl.resource, args.seed)
        runner = _run_units if wl.mode is WorkloadMode.UNITS else _run_ensemble
        report, code = runner(wl, args, rc, session_dir)
    except ResourceError as exc:
        print(f"error: resource: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except ValidationError as exc:
        print(f"error: invalid workload: {exc}", file=sys.stderr)
        return EXIT_INPUT
    report["exit_code"] = code
    out = _write_report(report, session_dir, args.report)
    counts = ", ".join(f"{k}={v}" for k, v in report["counts"].items()) or "no tasks"
    print(f"{report['session']}: {counts} in {report['wall_time']}s", file=sys.stderr)
    print(out)
    return code


def _final_states(session_dir) -> dict[str, dict[str, int]]:
    # a half-written last line is expected while a run is still going
    def on_corrupt(exc):
        if exc.reason != "truncated record":
            _warn_corrupt(exc)

    prof = profiling.Profile.load(session_dir, on_corrupt=on_corrupt, validate=False)
    out: dict[str, dict[str, int]] = {}
    for eid, kind in prof.kinds.items():
        state = prof.index[eid][-1]["event_name"]
        counts = out.setdefault(kind, {})
        counts[state] = counts.get(state, 0) + 1
    return {k: dict(sorted(v.items())) for k, v in sorted(out.items())}


def cmd_status(args) -> int:
    states = _final_states(args.session)
    if args.json:
        print(json.dumps(states, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"session {Path(args.session).name}")
    for kind, counts in states.items():
        for state, n in counts.items():
            print(f"{kind:<10} {state:<22} {n}")
    return EXIT_OK


def cmd_profile(args) -> int:
    prof = profiling.Profile.load(args.session, on_corrupt=_warn_corrupt)
    if args.analysis == "durations":
        text = profiling.to_json(profiling.durations(prof, args.entity))
    elif args.analysis == "concurrency":
        series = profiling.concurrency(prof, args.state, args.resolution, weight=args.weight)
        text = profiling.series_to_csv(series, args.weight or "count")
    elif args.analysis == "utilization":
        text = profiling.to_json({"pilot": args.pilot, "utilization": profiling.utilization(prof, args.pilot)})
    else:
        text = profiling.to_json(profiling.summary(prof, args.resolution))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilotkit", description="Pilot-job many-task runtime.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a workload file")
    run.add_argument("workload")
    run.add_argument("--resource", help="resource name, overriding the workload file")
    run.add_argument("--session", help="session directory (default: a new one under the cwd)")
    run.add_argument("--policy", choices=[p.value for p in SchedulerPolicy], type=str.upper)
    run.add_argument("--seed", type=int, help="seed for the simulated batch queue")
    run.add_argument("--executors", type=int, help="executor threads per agent")
    run.add_argument("--report", help=f"report path (default: SESSION/{REPORT_FILE})")
    run.set_defaults(func=cmd_run)

    status = sub.add_parser("status", help="state counts of a (possibly running) session")
    status.add_argument("--session", required=True)
    status.add_argument("--json", action="store_true")
    status.set_defaults(func=cmd_status)

    prof = sub.add_parser("profile", help="analyse a session's event log")
    prof.add_argument("--session", required=True)
    prof.add_argument("--output", "-o", help="write here instead of stdout")
    asub = prof.add_subparsers(dest="analysis", required=True)
    d = asub.add_parser("durations", help="seconds per state of one entity (JSON)")
    d.add_argument("entity")
    c = asub.add_parser("concurrency", help="entities in a state over time (CSV)")
    c.add_argument("state", type=str.upper)
    c.add_argument("--resolution", type=float, default=profiling.DEFAULT_RESOLUTION)
    c.add_argument("--weight", choices=["cores"])
    u = asub.add_parser("utilization", help="core utilization of one pilot (JSON)")
    u.add_argument("pilot")
    s = asub.add_parser("summary", help="overall summary (JSON)")
    s.add_argument("--resolution", type=float, default=profiling.DEFAULT_RESOLUTION)
    prof.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NoSuchSession, UnknownEntity, IllegalHistory, PilotNeverActive, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
