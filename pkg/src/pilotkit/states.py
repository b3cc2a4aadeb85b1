"""Entity state machines.

Every machine is a forward chain ending in a success state, plus a set of
abort states (FAILED, CANCELED) that any non-terminal state may jump to.
Terminal states have no successors.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .exceptions import IllegalTransition


class PilotState(str, Enum):
    NEW = "NEW"
    LAUNCHING = "LAUNCHING"
    QUEUED = "QUEUED"
    ACTIVE = "ACTIVE"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class UnitState(str, Enum):
    NEW = "NEW"
    UMGR_SCHEDULING = "UMGR_SCHEDULING"
    UMGR_STAGING_INPUT = "UMGR_STAGING_INPUT"
    AGENT_STAGING_INPUT = "AGENT_STAGING_INPUT"
    AGENT_SCHEDULING = "AGENT_SCHEDULING"
    EXECUTING = "EXECUTING"
    AGENT_STAGING_OUTPUT = "AGENT_STAGING_OUTPUT"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class TaskState(str, Enum):
    SPECIFIED = "SPECIFIED"
    SCHEDULED = "SCHEDULED"
    SUBMITTED = "SUBMITTED"
    EXECUTED = "EXECUTED"
    DONE = "DONE"
    FAILED = "FAILED"


class StageState(str, Enum):
    DESCRIBED = "DESCRIBED"
    SCHEDULING = "SCHEDULING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


class PipelineState(str, Enum):
    DESCRIBED = "DESCRIBED"
    SCHEDULING = "SCHEDULING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


@dataclass(frozen=True)
class StateMachine:
    name: str
    enum: type
    path: tuple
    aborts: tuple

    @property
    def initial(self):
        return self.path[0]

    @property
    def states(self) -> tuple:
        return self.path + self.aborts

    @property
    def terminal(self) -> frozenset:
        return frozenset((self.path[-1],) + self.aborts)

    def coerce(self, state):
        if isinstance(state, self.enum):
            return state
        try:
            return self.enum(getattr(state, "value", state))
        except ValueError:
            raise IllegalTransition(state, state, self.name) from None

    def is_terminal(self, state) -> bool:
        return self.coerce(state) in self.terminal

    def is_legal(self, current, target) -> bool:
        current, target = self.coerce(current), self.coerce(target)
        if current in self.terminal:
            return False
        if target in self.aborts:
            return True
        return self.path.index(target) == self.path.index(current) + 1 if target in self.path else False

    def edges(self) -> set:
        return {(a, b) for a in self.states for b in self.states if self.is_legal(a, b)}

    def rank(self, state) -> int:
        """Position along the forward chain; abort states rank past the end."""
        state = self.coerce(state)
        return self.path.index(state) if state in self.path else len(self.path)

    def __contains__(self, name) -> bool:
        return getattr(name, "value", name) in self.enum._value2member_map_


def _machine(enum, aborts):
    members = list(enum)
    return StateMachine(
        name=enum.__name__,
        enum=enum,
        path=tuple(m for m in members if m.value not in aborts),
        aborts=tuple(enum(a) for a in aborts),
    )


PILOT = _machine(PilotState, ("FAILED", "CANCELED"))
UNIT = _machine(UnitState, ("FAILED", "CANCELED"))
TASK = _machine(TaskState, ("FAILED",))
STAGE = _machine(StageState, ("FAILED", "CANCELED"))
PIPELINE = _machine(PipelineState, ("FAILED", "CANCELED"))

MACHINES = {m.name: m for m in (PILOT, UNIT, TASK, STAGE, PIPELINE)}

# event entity kind -> machine governing its state-entry events
BY_KIND = {"PILOT": PILOT, "UNIT": UNIT, "TASK": TASK, "STAGE": STAGE, "PIPELINE": PIPELINE}


def machine_for(machine) -> StateMachine:
    if isinstance(machine, StateMachine):
        return machine
    if isinstance(machine, type) and issubclass(machine, Enum):
        machine = machine.__name__
    try:
        return MACHINES[machine]
    except KeyError:
        raise ValueError(f"unknown state machine {machine!r}") from None


def transition(current, target, machine):
    """Return ``target`` if ``current -> target`` is an edge of ``machine``.

    Raises IllegalTransition otherwise. Emitting the matching Event is the
    caller's job.
    """
    m = machine_for(machine)
    if not m.is_legal(current, target):
        raise IllegalTransition(current, target, m.name)
    return m.coerce(target)
