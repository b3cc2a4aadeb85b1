"""Acceptance suite: one test per acceptance criterion.

Each test reports its measured values through the ``acceptance`` fixture;
the terminal summary prints one PASS/FAIL line per criterion. Run alone
with ``pytest tests/test_acceptance.py -v``.
"""

import json
import random
import shutil
import time

import pytest

from conftest import make_resource
from oracles import stage_violations
from pilotkit.cli import main
from pilotkit.client import PilotManager, Session, UnitManager
from pilotkit.ensemble import AppManager, Pipeline, ProcessType, Stage, Task
from pilotkit.model import PilotDescription, UnitDescription
from pilotkit.profiling import Profile, concurrency
from pilotkit.states import PilotState, UnitState
from pilotkit.store import replay_file
from slot_checks import compare_sequence

pytestmark = pytest.mark.slow


def exact_peak(events, state="EXECUTING", weight=None):
    """Largest overlap of ``state`` intervals, from an event sweep (no sampling)."""
    cores, entered, deltas = {}, {}, []
    for ev in events:
        if ev["entity_kind"] != "UNIT":
            continue
        uid = ev["entity_id"]
        if ev["event_name"] == "NEW":
            cores[uid] = (ev.get("payload") or {}).get("cores", 1)
        if ev["event_name"] == state:
            entered[uid] = ev["ts"]
        elif uid in entered:
            w = cores[uid] if weight == "cores" else 1
            deltas += [(entered.pop(uid), w), (ev["ts"], -w)]
    # a unit leaving at t is no longer counted at t
    deltas.sort(key=lambda d: (d[0], d[1]))
    running = best = 0
    for _, d in deltas:
        running += d
        best = max(best, running)
    return best


# -- 1. flagship -------------------------------------------------------------------

def test_01_flagship_sim_3072(tmp_path, acceptance):
    workload = {"mode": "UNITS", "pilot": {"resource": "sim-3072", "cores": 3072, "runtime": 10},
                "units": [{"executable": "/bin/bash", "arguments": ["-c", "sleep 3"], "cores": 24, "mpi": True,
                           "count": 128}]}
    path = tmp_path / "flagship.json"
    path.write_text(json.dumps(workload))
    session = tmp_path / "session"
    started = time.monotonic()
    code = main(["run", str(path), "--session", str(session)])
    runtime = time.monotonic() - started
    report = json.loads((session / "report.json").read_text())
    profile = Profile.load(session)
    cores_series = concurrency(profile, "EXECUTING", resolution=0.1, weight="cores")
    peak = exact_peak(profile.events)
    max_cores = max(c for _, c in cores_series)
    acceptance(done=report["counts"].get("DONE", 0), peak_executing=peak, max_bin_cores=max_cores,
               runtime_s=round(runtime, 2))
    assert code == 0
    assert report["counts"] == {"DONE": 128}
    assert peak == 128
    assert exact_peak(profile.events, weight="cores") <= 3072
    assert all(c <= 3072 for _, c in cores_series)
    assert runtime < 60


# -- 2. late binding -----------------------------------------------------------------

def test_02_late_binding_with_queue_wait(tmp_path, acceptance):
    rc = make_resource("queued", nodes=4, cores_per_node=4, wait=5.0)
    with Session(tmp_path / "s", resources=[rc]) as session:
        pmgr = PilotManager(session)
        umgr = UnitManager(session)
        pilot, = pmgr.submit_pilots(PilotDescription("queued", 16, 10))
        umgr.add_pilots(pilot)
        units = umgr.submit_units([UnitDescription("/bin/true")] * 16)
        states = umgr.wait_units(units, timeout=60)
    events = replay_file(session.path / "events.jsonl")
    active = [e for e in events if e["entity_id"] == pilot.id and e["event_name"] == "ACTIVE"][0]
    queued = [e for e in events if e["entity_id"] == pilot.id and e["event_name"] == "QUEUED"][0]
    assigned = [e for e in events if e["entity_kind"] == "UNIT" and e["event_name"] == "UMGR_STAGING_INPUT"]
    early = [e for e in assigned if e["seq"] < active["seq"] or e["ts"] < active["ts"]]
    acceptance(assignments=len(assigned), early_assignments=len(early),
               queue_wait_s=round((active["ts"] - queued["ts"]) / 1e9, 2))
    assert set(states.values()) == {UnitState.DONE}
    assert len(assigned) == 16 and early == []
    assert active["ts"] - queued["ts"] >= 5e9


# -- 3. agent scheduler oracle ----------------------------------------------------------

def test_03_scheduler_matches_oracle(acceptance):
    rng = random.Random(20240601)
    compared, mismatches = 0, []
    for _ in range(1000):
        n, m = compare_sequence(rng, rng.randint(1, 8), rng.randint(1, 4), rng.choice([0, 0, 1, 2]), 30)
        compared += n
        mismatches += m
    acceptance(sequences=1000, decisions=compared, mismatches=len(mismatches))
    assert mismatches == [], mismatches[:5]


# -- 4. stage ordering -------------------------------------------------------------------

def random_workflow(rng, tag):
    pipelines = []
    for p in range(rng.randint(1, 5)):
        stages = []
        for s in range(rng.randint(1, 4)):
            tasks = []
            for t in range(rng.randint(1, 16)):
                args = ("0.02",) if rng.random() < 0.25 else ("0",)
                tasks.append(Task(f"{tag}.p{p}.s{s}.t{t}", "/bin/sleep", args,
                                  cpu_reqs={"processes": rng.randint(1, 4), "process_type": ProcessType.NONE}))
            stages.append(Stage(f"{tag}.p{p}.s{s}", tasks))
        pipelines.append(Pipeline(f"{tag}.p{p}", stages))
    return pipelines


def test_04_stage_ordering(tmp_path, acceptance):
    rc = make_resource("ens", nodes=4, cores_per_node=8)
    rng = random.Random(7)
    violations, tasks, not_done = [], 0, 0
    for i in range(200):
        am = AppManager(session_root=tmp_path, resources=[rc],
                        resource_desc={"resource": "ens", "walltime": 10, "cpus": 32}, executors=8)
        am.workflow = random_workflow(rng, f"w{i}")
        report = am.run(session=tmp_path / f"w{i}", timeout=120)
        tasks += len(report["tasks"])
        not_done += sum(s != "DONE" for s in report["tasks"].values())
        violations += stage_violations(replay_file(tmp_path / f"w{i}" / "events.jsonl"))
        shutil.rmtree(tmp_path / f"w{i}")
    acceptance(workflows=200, tasks=tasks, violations=len(violations), not_done=not_done)
    assert violations == [], violations[:5]
    assert not_done == 0


# -- 5. fault recovery ----------------------------------------------------------------------

def recovery_workflow():
    def stage(uid, n, exe="/bin/sleep", args=("0.2",)):
        return Stage(uid, [Task(f"{uid}.t{k}", exe, args) for k in range(n)])

    good = Pipeline("good", [stage("good.s0", 4), stage("good.s1", 4), stage("good.s2", 2)])
    wide = Pipeline("wide", [stage("wide.s0", 6), stage("wide.s1", 3)])
    bad = Pipeline("bad", [Stage("bad.s0", [Task("bad.t0", "/bin/false"), Task("bad.t1", "/bin/true")]),
                           stage("bad.s1", 2)])
    return [good, wide, bad]


def recovery_run(tmp_path, name, victim=None, at_record=0):
    """Run the workflow; kill ``victim`` when the ``at_record``-th task record is journaled."""
    rc = make_resource("rec", nodes=2, cores_per_node=4)
    am = AppManager(session_root=tmp_path, resources=[rc], heartbeat_interval=0.05, heartbeat_threshold=3,
                    resource_desc={"resource": "rec", "walltime": 10, "cpus": 8})
    am.workflow = recovery_workflow()
    seen = [0]

    def on_record(rec):
        if rec["entity_kind"] != "TASK":
            return
        seen[0] += 1
        if seen[0] == at_record:
            am.kill_component(victim)

    if victim is not None:
        am.register_callback(on_record)
    report = am.run(session=tmp_path / name, timeout=120)
    done = {u for u, s in report["tasks"].items() if s == "DONE"}
    units = [e for e in replay_file(tmp_path / name / "events.jsonl")
             if e["entity_kind"] == "UNIT" and e["event_name"] == "DONE"]
    return done, report, len(units)


def test_05_fault_recovery(tmp_path, acceptance):
    reference, ref_report, _ = recovery_run(tmp_path, "reference")
    rng = random.Random(5)
    divergent, recovered, duplicate_runs = [], 0, 0
    for i in range(50):
        victim = rng.choice(["wfprocessor", "taskmanager"])
        # 21 tasks run, four records each; stop short of the very end
        at = rng.randint(1, 70)
        done, report, unit_done = recovery_run(tmp_path, f"run{i}", victim, at)
        recovered += report["restarts"] >= 1
        duplicate_runs += unit_done - len(done)
        if done != reference:
            divergent.append((i, victim, at, sorted(done ^ reference)))
        shutil.rmtree(tmp_path / f"run{i}")
    acceptance(runs=50, divergent=len(divergent), runs_recovered=recovered, reference_done=len(reference),
               duplicate_unit_runs=duplicate_runs)
    assert len(reference) == 20 and ref_report["pipelines"]["bad"]["state"] == "FAILED"
    assert divergent == [], divergent[:3]
    assert recovered == 50


# -- 6. heterogeneous mix --------------------------------------------------------------------

def test_06_heterogeneous_conservation(tmp_path, acceptance):
    rc = make_resource("mix", nodes=4, cores_per_node=24)
    mix = [(1, False), (4, False), (24, False), (1, True), (4, True), (24, True), (30, True), (2, False)]
    with Session(tmp_path / "s", resources=[rc]) as session:
        pmgr = PilotManager(session, audit=True)
        umgr = UnitManager(session)
        pilot, = pmgr.submit_pilots(PilotDescription("mix", 96, 10))
        umgr.add_pilots(pilot)
        cuds = [UnitDescription("/bin/sleep", ("0.1",), cores=c, mpi=m) for c, m in mix * 8]
        units = umgr.submit_units(cuds)
        states = umgr.wait_units(units, timeout=120)
        pmgr.cancel_pilots()
    events = replay_file(session.path / "events.jsonl")
    audit = [e["payload"] for e in events if e["event_name"] == "AUDIT"]
    checks = sum(a["checks"] for a in audit)
    violations = sum(a["violations"] for a in audit)
    acceptance(units=len(units), scheduler_checks=checks, violations=violations,
               max_executing_cores=exact_peak(events, weight="cores"))
    assert set(states.values()) == {UnitState.DONE}
    assert audit and checks >= 2 * len(units)
    assert violations == 0
    assert exact_peak(events, weight="cores") <= 96


# -- 7. throughput ----------------------------------------------------------------------------

def test_07_throughput_local(tmp_path, acceptance):
    n = 10_000
    with Session(tmp_path / "s") as session:
        pmgr = PilotManager(session)
        umgr = UnitManager(session)
        pilot, = pmgr.submit_pilots(PilotDescription("local-64", 64, 30))
        umgr.add_pilots(pilot)
        pmgr.wait_pilots([pilot], PilotState.ACTIVE, timeout=60)
        started = time.monotonic()
        units = umgr.submit_units([UnitDescription("/bin/true")] * n)
        states = umgr.wait_units(units, timeout=n / 50)
        elapsed = time.monotonic() - started
    rate = n / elapsed
    acceptance(units=n, seconds=round(elapsed, 1), units_per_s=round(rate, 1))
    assert sum(s is UnitState.DONE for s in states.values()) == n
    assert rate >= 50


# -- 8. replay determinism -----------------------------------------------------------------------

def test_08_replay_determinism(tmp_path, acceptance):
    rc = make_resource("det", nodes=2, cores_per_node=4)
    with Session(tmp_path / "a", resources=[rc]) as session:
        pmgr = PilotManager(session)
        umgr = UnitManager(session)
        pilot, = pmgr.submit_pilots(PilotDescription("det", 8, 10))
        umgr.add_pilots(pilot)
        units = umgr.submit_units([UnitDescription("/bin/sleep", ("0.1",), cores=c) for c in (1, 2, 4, 1, 3)])
        umgr.wait_units(units, timeout=60)
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    analyses = [("summary",), ("concurrency", "EXECUTING"), ("concurrency", "EXECUTING", "--weight", "cores"),
                ("durations", units[0].id), ("durations", pilot.id), ("utilization", pilot.id)]
    differing = []
    for k, analysis in enumerate(analyses):
        outs = []
        for copy in "ab":
            out = tmp_path / f"{copy}.{k}.out"
            assert main(["profile", "--session", str(tmp_path / copy), "-o", str(out), *analysis]) == 0
            outs.append(out.read_bytes())
        if outs[0] != outs[1] or not outs[0]:
            differing.append(analysis)
    acceptance(analyses=len(analyses), differing=len(differing))
    assert differing == []
