import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pilotkit.exceptions import IllegalTransition, ValidationError
from pilotkit.model import (EntityKind, Event, PilotDescription, StagingDirective, StagingMode,
                            UnitDescription, validate_unit_description)
from pilotkit.states import (MACHINES, PILOT, UNIT, PilotState, TaskState, UnitState, machine_for,
                             transition)

# forward chains and abort states, written out independently of states.py
CHAINS = {
    "PilotState": (["NEW", "LAUNCHING", "QUEUED", "ACTIVE", "DONE"], ["FAILED", "CANCELED"]),
    "UnitState": (["NEW", "UMGR_SCHEDULING", "UMGR_STAGING_INPUT", "AGENT_STAGING_INPUT",
                   "AGENT_SCHEDULING", "EXECUTING", "AGENT_STAGING_OUTPUT", "DONE"],
                  ["FAILED", "CANCELED"]),
    "TaskState": (["SPECIFIED", "SCHEDULED", "SUBMITTED", "EXECUTED", "DONE"], ["FAILED"]),
}


def expected_edges(chain, aborts):
    edges = {(a, b) for a, b in zip(chain, chain[1:])}
    for s in chain[:-1]:
        for a in aborts:
            edges.add((s, a))
    return edges


def test_unit_first_edge():
    assert transition(UnitState.NEW, UnitState.UMGR_SCHEDULING, UnitState) is UnitState.UMGR_SCHEDULING


def test_failure_reachable_from_executing():
    assert transition("EXECUTING", "FAILED", "UnitState") is UnitState.FAILED


def test_done_to_executing_is_illegal():
    with pytest.raises(IllegalTransition):
        transition(UnitState.DONE, UnitState.EXECUTING, UnitState)


@pytest.mark.parametrize("name", sorted(CHAINS))
def test_cross_product_matches_machine(name):
    chain, aborts = CHAINS[name]
    m = machine_for(name)
    allowed = expected_edges(chain, aborts)
    names = chain + aborts
    assert sorted(s.value for s in m.states) == sorted(names)
    for a, b in itertools.product(names, names):
        if (a, b) in allowed:
            assert transition(a, b, name).value == b
        else:
            with pytest.raises(IllegalTransition):
                transition(a, b, name)


def test_every_machine_terminal_states_have_no_successors():
    for m in MACHINES.values():
        for t in m.terminal:
            assert not any(m.is_legal(t, s) for s in m.states)


def test_unknown_machine():
    with pytest.raises(ValueError):
        machine_for("Nope")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(list(UnitState)), max_size=30))
def test_random_transition_sequences_form_paths(targets):
    state, history = UnitState.NEW, [UnitState.NEW]
    for t in targets:
        try:
            state = transition(state, t, UNIT)
        except IllegalTransition:
            continue
        history.append(state)
    assert len(history) == len(set(history))
    for a, b in zip(history, history[1:]):
        assert UNIT.is_legal(a, b)
    assert [UNIT.rank(s) for s in history] == sorted(UNIT.rank(s) for s in history)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(list(PilotState)), max_size=20))
def test_event_replay_reconstructs_final_state(targets):
    state, events = PilotState.NEW, []
    for t in targets:
        try:
            state = transition(state, t, PILOT)
        except IllegalTransition:
            continue
        events.append(Event(EntityKind.PILOT, "pilot.0000", state.value, "test").to_json())
    replayed = PilotState.NEW
    for line in events:
        replayed = PilotState(Event.from_json(line).event_name)
    assert replayed is state


def test_task_machine_has_no_cancel():
    assert "CANCELED" not in [s.value for s in TaskState]


# -- descriptions ------------------------------------------------------------

def test_full_node_mpi_unit_is_valid():
    cud = validate_unit_description(UnitDescription(executable="/bin/bash", cores=24, mpi=True))
    assert cud.cores == 24 and cud.mpi and cud.gpus == 0
    assert cud.input_staging == () and dict(cud.environment) == {}


def test_empty_executable_rejected():
    with pytest.raises(ValidationError) as err:
        validate_unit_description(UnitDescription(executable="", cores=1))
    assert err.value.field == "executable"


@pytest.mark.parametrize("cores", [0, -1, 1.5, True])
def test_bad_cores_rejected(cores):
    with pytest.raises(ValidationError) as err:
        validate_unit_description(UnitDescription(executable="/bin/true", cores=cores))
    assert err.value.field == "cores"


def test_duplicate_staging_destination_rejected():
    cud = UnitDescription(executable="/bin/true", input_staging=("a/in.dat > in.dat", "b/in.dat > in.dat"))
    with pytest.raises(ValidationError) as err:
        validate_unit_description(cud)
    assert err.value.field == "input_staging"


def test_escaping_destination_rejected():
    cud = UnitDescription(executable="/bin/true", input_staging=({"source": "/x", "destination": "../x"},))
    with pytest.raises(ValidationError):
        validate_unit_description(cud)


def test_validation_is_idempotent():
    cud = validate_unit_description(UnitDescription(
        executable="/bin/echo", arguments=["a", "b"], input_staging=["/tmp/x.dat"], cores=2))
    assert validate_unit_description(cud) == cud


def test_staging_directive_forms():
    d = StagingDirective.parse("/data/in.gro")
    assert (d.source, d.destination, d.mode) == ("/data/in.gro", "in.gro", StagingMode.COPY)
    d = StagingDirective.parse("/data/in.gro > sub/x.gro", StagingMode.LINK)
    assert (d.destination, d.mode) == ("sub/x.gro", StagingMode.LINK)
    d = StagingDirective.parse({"source": "a", "destination": "b", "mode": "MOVE"})
    assert d.mode is StagingMode.MOVE


def test_pilot_description_validation():
    PilotDescription("sim-3072", 3072, 120).validate()
    for kwargs, field in [({"cores": 0}, "cores"), ({"runtime": 0}, "runtime"), ({"gpus": -1}, "gpus")]:
        base = {"resource": "sim-3072", "cores": 24, "runtime": 10, **kwargs}
        with pytest.raises(ValidationError) as err:
            PilotDescription(**base).validate()
        assert err.value.field == field


def test_unit_description_round_trip():
    cud = UnitDescription(executable="/bin/echo", arguments=("hi",), cores=3, mpi=True, name="x")
    again = UnitDescription.from_dict(json.loads(json.dumps(cud.to_dict())))
    assert validate_unit_description(again).to_dict() == cud.to_dict()


def test_event_serialization():
    ev = Event(EntityKind.UNIT, "unit.000001", "EXECUTING", "agent", {"a": 1})
    back = Event.from_json(ev.to_json())
    assert back == ev
    assert isinstance(ev.ts, int) and ev.time == ev.ts / 1e9
