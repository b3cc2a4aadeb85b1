"""The agent driven directly through the session bridge, without a client."""

import time

import pytest

from conftest import make_resource
from pilotkit.agent import Agent, AgentConfig
from pilotkit.agent.agent import sandbox_dir, staging_dir
from pilotkit.model import UnitDescription
from pilotkit.store import SessionStore

PID = "pilot.0000"


class Harness:
    def __init__(self, path, cores=8, cores_per_node=4, walltime=None, executors=4):
        self.store = SessionStore(path)
        self.path = path
        rc = make_resource(nodes=8, cores_per_node=cores_per_node)
        self.agent = Agent(AgentConfig(PID, str(path), rc, cores, walltime=walltime,
                                       executors=executors, audit=True))
        self.events = []
        self.checks = []
        self.agent.observer = lambda event, uid, table: self.checks.append(table.conserved())

    def start(self):
        self.agent.start()
        return self

    def send(self, uid, desc: UnitDescription, inputs=(), outputs=()):
        self.store.inbox.put({"type": "unit", "target": PID,
                              "unit": {"id": uid, "description": desc.to_dict()},
                              "inputs": list(inputs), "outputs": list(outputs)})

    def pump(self):
        for m in self.store.outbox.get_bulk("client", timeout=0.01):
            self.events.append(m["event"])

    def final(self, uid):
        names = [e["event_name"] for e in self.events if e["entity_id"] == uid]
        return names[-1] if names else None

    def wait_final(self, uids, timeout=30):
        deadline = time.monotonic() + timeout
        terminal = {"DONE", "FAILED", "CANCELED"}
        while time.monotonic() < deadline:
            self.pump()
            if all(self.final(u) in terminal for u in uids):
                return {u: self.final(u) for u in uids}
            time.sleep(0.01)
        raise AssertionError(f"units not finished: {[(u, self.final(u)) for u in uids]}")

    def shutdown(self):
        self.store.inbox.put({"type": "shutdown", "target": PID, "reason": "test"})
        assert self.agent.wait(30)
        self.pump()
        self.store.close()

    def history(self, uid):
        return [e["event_name"] for e in self.events if e["entity_id"] == uid]


@pytest.fixture
def harness(tmp_path):
    h = Harness(tmp_path / "session").start()
    yield h
    if not h.agent._done.is_set():
        h.shutdown()


def test_active_event_first(harness):
    harness.pump()
    first = harness.events[0]
    assert (first["entity_kind"], first["event_name"]) == ("PILOT", "ACTIVE")
    assert first["payload"]["slots"]["cores"] == 8


def test_unit_lifecycle(harness):
    harness.send("unit.000001", UnitDescription("/bin/true"))
    harness.send("unit.000002", UnitDescription("/bin/false"))
    assert harness.wait_final(["unit.000001", "unit.000002"]) == {"unit.000001": "DONE",
                                                                   "unit.000002": "FAILED"}
    assert harness.history("unit.000001") == ["AGENT_STAGING_INPUT", "AGENT_SCHEDULING", "EXECUTING",
                                              "AGENT_STAGING_OUTPUT", "DONE"]
    failed = [e for e in harness.events if e["entity_id"] == "unit.000002"][-1]
    assert failed["payload"]["exit_code"] == 1
    sb = sandbox_dir(harness.path, PID, "unit.000001")
    assert (sb / "STDOUT").exists() and (sb / "STDERR").exists()


def test_spawn_failure_fails_unit(harness):
    harness.send("unit.000001", UnitDescription("/no/such/exe"))
    assert harness.wait_final(["unit.000001"]) == {"unit.000001": "FAILED"}


def test_impossible_unit_fails(harness):
    harness.send("unit.000001", UnitDescription("/bin/true", cores=5))
    harness.send("unit.000002", UnitDescription("/bin/true", cores=9, mpi=True))
    assert set(harness.wait_final(["unit.000001", "unit.000002"]).values()) == {"FAILED"}


def test_fifo_retry_after_release(harness):
    # fill the pilot, then queue one more; it runs as soon as cores free up
    harness.send("unit.000001", UnitDescription("/bin/sleep", ("0.3",), cores=8, mpi=True))
    harness.send("unit.000002", UnitDescription("/bin/true", cores=4))
    harness.wait_final(["unit.000001", "unit.000002"])
    ts = {(e["entity_id"], e["event_name"]): e["ts"] for e in harness.events}
    assert ts[("unit.000002", "EXECUTING")] >= ts[("unit.000001", "AGENT_STAGING_OUTPUT")]


def test_heterogeneous_conservation(harness):
    uids = []
    for i, (cores, mpi) in enumerate([(1, False), (4, False), (6, True), (2, False), (8, True), (3, True)] * 3):
        uid = f"unit.{i:06d}"
        uids.append(uid)
        harness.send(uid, UnitDescription("/bin/sleep", ("0.05",), cores=cores, mpi=mpi))
    assert set(harness.wait_final(uids).values()) == {"DONE"}
    assert harness.checks and all(harness.checks)
    assert harness.agent.violations == 0


def test_staging_in_and_out(harness, tmp_path):
    staging = staging_dir(harness.path, PID)
    staging.mkdir(parents=True, exist_ok=True)
    (staging / "in.dat").write_text("42")
    target = tmp_path / "results" / "out.dat"
    desc = UnitDescription("/bin/sh", ("-c", "cat in.dat > out.dat"))
    harness.send("unit.000001", desc,
                 inputs=[{"source": str(staging / "in.dat"), "destination": "in.dat", "mode": "LINK"}],
                 outputs=[{"source": "out.dat", "destination": str(target), "mode": "COPY"}])
    harness.send("unit.000002", UnitDescription("/bin/true"),
                 outputs=[{"source": "never.dat", "destination": str(tmp_path / "x"), "mode": "COPY"}])
    assert harness.wait_final(["unit.000001", "unit.000002"]) == {"unit.000001": "DONE",
                                                                   "unit.000002": "FAILED"}
    assert target.read_text() == "42"
    err = [e for e in harness.events if e["entity_id"] == "unit.000002"][-1]["payload"]["error"]
    assert "MissingOutput" in err


def test_cancel_running_unit(harness):
    harness.send("unit.000001", UnitDescription("/bin/sleep", ("30",)))
    deadline = time.monotonic() + 10
    while harness.final("unit.000001") != "EXECUTING" and time.monotonic() < deadline:
        harness.pump()
        time.sleep(0.01)
    harness.store.inbox.put({"type": "cancel", "target": PID, "units": ["unit.000001"]})
    assert harness.wait_final(["unit.000001"]) == {"unit.000001": "CANCELED"}


def test_crashing_unit_does_not_affect_others(harness):
    harness.send("unit.000001", UnitDescription("/bin/sh", ("-c", "kill -9 $$")))
    harness.send("unit.000002", UnitDescription("/bin/sleep", ("0.1",)))
    assert harness.wait_final(["unit.000001", "unit.000002"]) == {"unit.000001": "FAILED",
                                                                   "unit.000002": "DONE"}


def test_walltime_cancels_running_units(tmp_path):
    h = Harness(tmp_path / "s", walltime=0.5).start()
    h.send("unit.000001", UnitDescription("/bin/sleep", ("30",)))
    assert h.wait_final(["unit.000001"]) == {"unit.000001": "CANCELED"}
    assert h.agent.wait(10)
    h.pump()
    cancel = [e for e in h.events if e["entity_id"] == "unit.000001"][-1]
    assert cancel["payload"]["reason"] == "walltime"
    audit = [e for e in h.events if e["event_name"] == "AUDIT"]
    assert audit and audit[0]["payload"]["violations"] == 0


def test_units_after_shutdown_are_canceled(tmp_path):
    h = Harness(tmp_path / "s").start()
    h.agent.close("test")
    assert h.agent.wait(10)
    assert h.agent.closing == "test"


def test_64_concurrent_sleeps_overlap(tmp_path):
    h = Harness(tmp_path / "s", cores=64, cores_per_node=8, executors=4).start()
    uids = [f"unit.{i:06d}" for i in range(64)]
    for u in uids:
        h.send(u, UnitDescription("/bin/sleep", ("1",)))
    assert set(h.wait_final(uids, timeout=60).values()) == {"DONE"}
    h.shutdown()
    start = {e["entity_id"]: e["ts"] for e in h.events if e["event_name"] == "EXECUTING"}
    end = {e["entity_id"]: e["ts"] for e in h.events if e["event_name"] == "AGENT_STAGING_OUTPUT"}
    # all 64 intervals share a common instant
    assert max(start.values()) < min(end.values())


def test_component_crash_fails_units_instead_of_hanging(tmp_path):
    h = Harness(tmp_path / "s").start()

    def broken(event, uid, table):
        raise RuntimeError("injected")

    h.agent.observer = broken
    h.send("unit.000001", UnitDescription("/bin/true"))
    assert h.wait_final(["unit.000001"]) == {"unit.000001": "FAILED"}
    assert h.agent.wait(10)
