"""Pilot and unit managers against in-process agents."""

import time

import pytest

from conftest import make_resource
from pilotkit.client import PilotManager, SchedulerPolicy, Session, UnitManager
from pilotkit.exceptions import DuplicateAttachment, Timeout
from pilotkit.model import PilotDescription, UnitDescription
from pilotkit.resources import AgentLaunch
from pilotkit.states import PilotState, UnitState
from pilotkit.store import replay_file


def records(session):
    return replay_file(session.path / "events.jsonl")


def first_ts(recs, eid, name):
    return min(r["ts"] for r in recs if r["entity_id"] == eid and r["event_name"] == name)


@pytest.fixture
def env(tmp_path):
    rc = make_resource(nodes=4, cores_per_node=4, wait=0.0)
    session = Session(tmp_path / "s", resources=[rc])
    pmgr = PilotManager(session)
    yield session, pmgr
    session.close()


def start_pilots(pmgr, *cores):
    pilots = pmgr.submit_pilots([PilotDescription("test", c, 10) for c in cores])
    pmgr.wait_pilots(pilots, PilotState.ACTIVE, timeout=30)
    return pilots


def test_pilot_becomes_active(env):
    session, pmgr = env
    pilot, = start_pilots(pmgr, 8)
    assert pilot.state is PilotState.ACTIVE
    hist = [r["event_name"] for r in records(session) if r["entity_id"] == pilot.id]
    assert hist == ["NEW", "LAUNCHING", "QUEUED", "ACTIVE"]


def test_submit_empty_list(env):
    assert env[1].submit_pilots([]) == []


def test_oversubscribed_pilot_fails_alone(env):
    session, pmgr = env
    good, bad = pmgr.submit_pilots([PilotDescription("test", 16, 10), PilotDescription("test", 17, 10)])
    states = pmgr.wait_pilots([bad], timeout=30)
    assert states[bad.id] is PilotState.FAILED
    assert "Oversubscribed" in bad.error
    pmgr.wait_pilots([good], PilotState.ACTIVE, timeout=30)
    assert good.state is PilotState.ACTIVE


def test_cancel_pilot(env):
    _, pmgr = env
    pilot, = start_pilots(pmgr, 4)
    assert pmgr.cancel_pilots([pilot])[pilot.id] is PilotState.CANCELED


def test_duplicate_attachment(env):
    session, pmgr = env
    pilot, = pmgr.submit_pilots(PilotDescription("test", 4, 10))
    umgr = UnitManager(session)
    umgr.add_pilots(pilot)
    with pytest.raises(DuplicateAttachment):
        umgr.add_pilots([pilot])


def test_invalid_unit_fails_others_run(env):
    session, pmgr = env
    umgr = UnitManager(session)
    umgr.add_pilots(start_pilots(pmgr, 4))
    units = umgr.submit_units([UnitDescription("/bin/true")] * 3 + [UnitDescription("", cores=1)])
    states = umgr.wait_units(units, timeout=30)
    assert [states[u.id] for u in units] == [UnitState.DONE] * 3 + [UnitState.FAILED]
    assert units[3].error


def test_unit_history_and_pilot_binding(env):
    session, pmgr = env
    umgr = UnitManager(session)
    pilot, = start_pilots(pmgr, 4)
    umgr.add_pilots(pilot)
    unit, = umgr.submit_units(UnitDescription("/bin/true"))
    umgr.wait_units([unit], timeout=30)
    hist = [r["event_name"] for r in records(session) if r["entity_id"] == unit.id]
    assert hist == ["NEW", "UMGR_SCHEDULING", "UMGR_STAGING_INPUT", "AGENT_STAGING_INPUT",
                    "AGENT_SCHEDULING", "EXECUTING", "AGENT_STAGING_OUTPUT", "DONE"]
    assert unit.pilot_id == pilot.id and unit.exit_code == 0


def test_late_binding_waits_for_active(tmp_path):
    rc = make_resource(wait=1.0)
    with Session(tmp_path / "s", resources=[rc]) as session:
        pmgr = PilotManager(session)
        umgr = UnitManager(session)
        pilot, = pmgr.submit_pilots(PilotDescription("test", 4, 10))
        umgr.add_pilots(pilot)
        units = umgr.submit_units([UnitDescription("/bin/true")] * 4)
        time.sleep(0.3)
        assert all(u.state is UnitState.UMGR_SCHEDULING for u in units)
        umgr.wait_units(units, timeout=30)
        recs = records(session)
    active = first_ts(recs, pilot.id, "ACTIVE")
    assert all(first_ts(recs, u.id, "UMGR_STAGING_INPUT") > active for u in units)


def test_round_robin_alternates(env):
    session, pmgr = env
    umgr = UnitManager(session, SchedulerPolicy.ROUND_ROBIN)
    a, b = start_pilots(pmgr, 4, 4)
    umgr.add_pilots([a, b])
    units = umgr.submit_units([UnitDescription("/bin/true")] * 4)
    umgr.wait_units(units, timeout=30)
    assert [u.pilot_id for u in units] == [a.id, b.id, a.id, b.id]


def test_backfill_prefers_most_free_cores(env):
    session, pmgr = env
    umgr = UnitManager(session, SchedulerPolicy.BACKFILL)
    small, big = start_pilots(pmgr, 4, 12)
    umgr.add_pilots([small, big])
    units = umgr.submit_units([UnitDescription("/bin/sleep", ("0.5",), cores=4)] * 3)
    umgr.wait_units(units, timeout=30)
    # 12 free > 4 free, then 8 > 4, then 4 == 4 with ties to the first attached
    assert [u.pilot_id for u in units] == [big.id, big.id, small.id]


def test_unschedulable_unit(env):
    session, pmgr = env
    umgr = UnitManager(session)
    umgr.add_pilots(start_pilots(pmgr, 4))
    unit, = umgr.submit_units(UnitDescription("/bin/true", cores=5))
    assert umgr.wait_units([unit], timeout=30)[unit.id] is UnitState.FAILED
    assert "Unschedulable" in unit.error


def test_input_staging_shared_area(env, tmp_path):
    session, pmgr = env
    umgr = UnitManager(session)
    pilot, = start_pilots(pmgr, 4)
    umgr.add_pilots(pilot)
    data = tmp_path / "data"
    data.mkdir()
    names = ["FRF.itp", "dynamic.mdp", "FF.itp", "martini_v2.2.itp", "85-20.top", "init85-20.gro"]
    for n in names:
        (data / n).write_text(n)
    desc = UnitDescription("/bin/sh", ("-c", "cat " + " ".join(names) + " > all.txt"),
                           input_staging=tuple(str(data / n) for n in names))
    missing = UnitDescription("/bin/true", input_staging=(str(data / "absent.gro"),))
    units = umgr.submit_units([desc, desc, missing])
    states = umgr.wait_units(units, timeout=30)
    assert [states[u.id] for u in units] == [UnitState.DONE, UnitState.DONE, UnitState.FAILED]
    assert "absent.gro" in units[2].error
    area = session.path / pilot.id / "staging"
    assert len([p for p in area.iterdir() if not p.name.startswith(".")]) == 6
    out = session.path / pilot.id / units[0].id / "all.txt"
    assert out.read_text() == "".join(names)


def test_output_staging(env, tmp_path):
    session, pmgr = env
    umgr = UnitManager(session)
    umgr.add_pilots(start_pilots(pmgr, 4))
    target = tmp_path / "results" / "out.txt"
    unit, = umgr.submit_units(UnitDescription("/bin/sh", ("-c", "echo ok > out.txt"),
                                              output_staging=(f"out.txt > {target}",)))
    assert umgr.wait_units([unit], timeout=30)[unit.id] is UnitState.DONE
    assert target.read_text() == "ok\n"


def test_wait_units_edge_cases(env):
    session, pmgr = env
    umgr = UnitManager(session)
    assert umgr.wait_units([], timeout=0) == {}
    umgr.add_pilots(start_pilots(pmgr, 4))
    units = umgr.submit_units([UnitDescription("/bin/true"), UnitDescription("/bin/false"),
                               UnitDescription("/bin/sleep", ("30",))])
    with pytest.raises(Timeout):
        umgr.wait_units(units, timeout=1.0)
    umgr.cancel_units([units[2]])
    states = umgr.wait_units(units, timeout=30)
    assert [states[u.id] for u in units] == [UnitState.DONE, UnitState.FAILED, UnitState.CANCELED]


def test_cancel_before_any_pilot(env):
    session, _ = env
    umgr = UnitManager(session)
    unit, = umgr.submit_units(UnitDescription("/bin/true"))
    umgr.cancel_units()
    assert umgr.wait_units([unit], timeout=5)[unit.id] is UnitState.CANCELED


def test_scheduler_kill_and_restart(env):
    session, pmgr = env
    umgr = UnitManager(session)
    umgr.add_pilots(start_pilots(pmgr, 4))
    umgr.kill_component("scheduler")
    units = umgr.submit_units([UnitDescription("/bin/true")] * 5)
    time.sleep(0.2)
    assert all(u.state is UnitState.UMGR_SCHEDULING for u in units)
    umgr.restart_component("scheduler")
    states = umgr.wait_units(units, timeout=30)
    assert set(states.values()) == {UnitState.DONE}
    assert len(umgr.units) == 5


def test_units_fail_when_last_pilot_is_gone(env):
    session, pmgr = env
    umgr = UnitManager(session)
    pilot, = start_pilots(pmgr, 4)
    umgr.add_pilots(pilot)
    pmgr.cancel_pilots()
    unit, = umgr.submit_units(UnitDescription("/bin/true"))
    assert umgr.wait_units([unit], timeout=10)[unit.id] is UnitState.FAILED
    assert unit.error == "no live pilot left"


def test_callbacks_see_every_state(env):
    session, pmgr = env
    umgr = UnitManager(session)
    seen = []
    umgr.register_callback(lambda u, s: seen.append(s))
    umgr.add_pilots(start_pilots(pmgr, 4))
    unit, = umgr.submit_units(UnitDescription("/bin/true"))
    umgr.wait_units([unit], timeout=30)
    # callbacks run after the state change, so the last one may trail the wait
    deadline = time.monotonic() + 5
    while seen[-1] is not UnitState.DONE and time.monotonic() < deadline:
        time.sleep(0.01)
    assert seen[0] is UnitState.UMGR_SCHEDULING and seen[-1] is UnitState.DONE
    assert len(seen) == len(set(seen)) == 7


def test_subprocess_agent(tmp_path):
    rc = make_resource(wait=0.0, launch=AgentLaunch.SUBPROCESS)
    with Session(tmp_path / "s", resources=[rc]) as session:
        pmgr = PilotManager(session)
        umgr = UnitManager(session)
        pilot, = start_pilots(pmgr, 4)
        umgr.add_pilots(pilot)
        units = umgr.submit_units([UnitDescription("/bin/echo", ("hi",))] * 3)
        states = umgr.wait_units(units, timeout=60)
    assert set(states.values()) == {UnitState.DONE}
    assert pilot.state in (PilotState.CANCELED, PilotState.DONE)
