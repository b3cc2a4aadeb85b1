"""Application state of an ensemble run, rebuilt from its journal.

``AppManagerState`` changes only through ``apply``, which folds one
journal record into the state. The operations below are pure: they read
the state and return the journal records that express the change, without
touching the state. The AppManager persists those records and then
applies them, so replaying the journal reproduces the state exactly.

Journal records are event dicts (``entity_kind``, ``entity_id``,
``event_name``, ``payload``):

* ``PIPELINE DESCRIBED {"spec": ...}`` adds a pipeline with its stages and tasks;
* ``TASK|STAGE|PIPELINE <state>`` are state entries;
* ``PIPELINE ADVANCE {"cursor": i}`` moves the pipeline to stage i;
* ``PIPELINE SUSPEND|RESUME|STOP`` change the pipeline's control state;
* ``PIPELINE ADD_STAGE {"stage": ...}`` and ``STAGE ADD_TASK {"task": ...}``
  adapt the workflow.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from ..exceptions import ImmutablePast, InvalidControl, StaleUpdate, UnknownTask, ValidationError
from ..states import PIPELINE, STAGE, TASK, PipelineState, StageState, TaskState
from .entities import Pipeline, Stage, Task, translate_task

log = logging.getLogger(__name__)

COMPONENT = "appmanager"


class Control(str, Enum):
    RUNNING = "RUNNING"
    SUSPENDED = "SUSPENDED"
    STOPPED = "STOPPED"


@dataclass
class TaskRecord:
    uid: str
    pipeline: str
    stage: str
    spec: dict
    state: TaskState = TaskState.SPECIFIED
    exit_code: int | None = None
    error: str | None = None


@dataclass
class StageRecord:
    uid: str
    pipeline: str
    index: int
    tasks: list = field(default_factory=list)
    state: StageState = StageState.DESCRIBED


@dataclass
class PipelineRecord:
    uid: str
    stages: list = field(default_factory=list)
    cursor: int = 0
    control: Control = Control.RUNNING
    state: PipelineState = PipelineState.DESCRIBED


def record(kind: str, entity_id: str, name, payload=None) -> dict:
    return {"entity_kind": kind, "entity_id": entity_id,
            "event_name": getattr(name, "value", name), "payload": payload}


class AppManagerState:
    def __init__(self, continue_on_failure: bool = False):
        self.continue_on_failure = continue_on_failure
        self.pipelines: dict[str, PipelineRecord] = {}
        self.stages: dict[str, StageRecord] = {}
        self.tasks: dict[str, TaskRecord] = {}

    @classmethod
    def replay(cls, records: Iterable[dict], continue_on_failure: bool = False) -> "AppManagerState":
        """Rebuild state from journal records (other log records are skipped)."""
        state = cls(continue_on_failure)
        for rec in records:
            if rec.get("component", COMPONENT) == COMPONENT:
                state.apply(rec)
        return state

    # -- reducer -------------------------------------------------------------

    def apply(self, rec: dict):
        kind, eid, name = rec["entity_kind"], rec["entity_id"], rec["event_name"]
        payload = rec.get("payload") or {}
        if kind == "PIPELINE":
            if name == "DESCRIBED" and "spec" in payload:
                self._add_pipeline(payload["spec"])
            elif name == "ADVANCE":
                self.pipelines[eid].cursor = int(payload["cursor"])
            elif name in ("SUSPEND", "RESUME", "STOP"):
                p = self.pipelines[eid]
                p.control = {"SUSPEND": Control.SUSPENDED, "RESUME": Control.RUNNING,
                             "STOP": Control.STOPPED}[name]
            elif name == "ADD_STAGE":
                self._add_stage(self.pipelines[eid], payload["stage"])
            else:
                p = self.pipelines[eid]
                p.state = PIPELINE.coerce(name)
                if p.state in (PipelineState.FAILED, PipelineState.CANCELED):
                    p.control = Control.STOPPED
        elif kind == "STAGE":
            if name == "ADD_TASK":
                s = self.stages[eid]
                self._add_task(s, payload["task"])
            else:
                self.stages[eid].state = STAGE.coerce(name)
        elif kind == "TASK":
            t = self.tasks[eid]
            t.state = TASK.coerce(name)
            if "exit_code" in payload:
                t.exit_code = payload["exit_code"]
            if payload.get("error"):
                t.error = payload["error"]

    def _add_pipeline(self, spec: dict):
        p = PipelineRecord(spec["uid"])
        self.pipelines[p.uid] = p
        for s in spec["stages"]:
            self._add_stage(p, s)

    def _add_stage(self, p: PipelineRecord, spec: dict):
        s = StageRecord(spec["uid"], p.uid, len(p.stages))
        self.stages[s.uid] = s
        p.stages.append(s.uid)
        for t in spec["tasks"]:
            self._add_task(s, t)

    def _add_task(self, s: StageRecord, spec: dict):
        t = TaskRecord(spec["uid"], s.pipeline, s.uid, copy.deepcopy(spec))
        self.tasks[t.uid] = t
        s.tasks.append(t.uid)

    # -- queries ---------------------------------------------------------------

    def cursor_stage(self, p: PipelineRecord) -> StageRecord | None:
        return self.stages[p.stages[p.cursor]] if p.cursor < len(p.stages) else None

    def in_flight(self) -> list[str]:
        return [t.uid for t in self.tasks.values() if t.state in (TaskState.SCHEDULED, TaskState.SUBMITTED)]

    def finished(self) -> bool:
        """Every pipeline is terminal and no dispatched task is outstanding."""
        return all(PIPELINE.is_terminal(p.state) for p in self.pipelines.values()) and not self.in_flight()

    def snapshot(self) -> dict:
        """Canonical, JSON-serializable view used for comparisons and reports."""
        return {
            "pipelines": {u: {"state": p.state.value, "control": p.control.value, "cursor": p.cursor,
                              "stages": list(p.stages)} for u, p in sorted(self.pipelines.items())},
            "stages": {u: {"state": s.state.value, "tasks": list(s.tasks)}
                       for u, s in sorted(self.stages.items())},
            "tasks": {u: {"state": t.state.value, "exit_code": t.exit_code}
                      for u, t in sorted(self.tasks.items())},
        }


# -- pure operations --------------------------------------------------------

def describe(pipelines: Iterable[Pipeline]) -> list[dict]:
    return [record("PIPELINE", p.uid, "DESCRIBED", {"spec": p.to_dict()}) for p in pipelines]


def start(state: AppManagerState) -> list[dict]:
    return [record("PIPELINE", p.uid, PipelineState.SCHEDULING)
            for p in state.pipelines.values() if p.state is PipelineState.DESCRIBED]


def ready_tasks(state: AppManagerState) -> list[str]:
    """SPECIFIED tasks of the cursor stage of every RUNNING pipeline."""
    out = []
    for p in state.pipelines.values():
        if p.control is not Control.RUNNING or PIPELINE.is_terminal(p.state):
            continue
        s = state.cursor_stage(p)
        if s is None:
            continue
        out.extend(u for u in s.tasks if state.tasks[u].state is TaskState.SPECIFIED)
    return out


def mark_scheduled(state: AppManagerState, uids: Iterable[str]) -> list[dict]:
    recs = []
    touched = set()
    for uid in uids:
        t = _task(state, uid)
        if t.state is not TaskState.SPECIFIED:
            continue
        s = state.stages[t.stage]
        if s.state is StageState.DESCRIBED and s.uid not in touched:
            recs.append(record("STAGE", s.uid, StageState.SCHEDULING))
            touched.add(s.uid)
        recs.append(record("TASK", uid, TaskState.SCHEDULED))
    return recs


def mark_submitted(state: AppManagerState, uids: Iterable[str]) -> list[dict]:
    recs = []
    for uid in uids:
        t = _task(state, uid)
        if t.state is TaskState.SCHEDULED:
            recs.append(record("TASK", uid, TaskState.SUBMITTED))
    return recs


def mark_task_done(state: AppManagerState, uid: str, outcome, info: dict | None = None) -> list[dict]:
    """Records for a finished task plus any stage/pipeline consequences.

    Raises StaleUpdate when the task is already terminal.
    """
    t = _task(state, uid)
    outcome = TaskState(getattr(outcome, "value", outcome))
    if outcome not in (TaskState.DONE, TaskState.FAILED):
        raise ValueError(f"task outcome must be DONE or FAILED, got {outcome.value}")
    if TASK.is_terminal(t.state):
        raise StaleUpdate(f"{uid} is already {t.state.value}")
    info = dict(info or {})
    recs = []
    # completions may overtake the dispatch bookkeeping after a restart
    for step in (TaskState.SCHEDULED, TaskState.SUBMITTED):
        if TASK.rank(t.state) < TASK.rank(step):
            recs.append(record("TASK", uid, step))
    if outcome is TaskState.DONE:
        recs.append(record("TASK", uid, TaskState.EXECUTED))
        recs.append(record("TASK", uid, TaskState.DONE, info or None))
    else:
        if info.get("executed", True):
            recs.append(record("TASK", uid, TaskState.EXECUTED))
        recs.append(record("TASK", uid, TaskState.FAILED, info or None))
    recs += _stage_consequences(state, t, outcome)
    return recs


def _stage_consequences(state: AppManagerState, t: TaskRecord, outcome: TaskState) -> list[dict]:
    s = state.stages[t.stage]
    p = state.pipelines[s.pipeline]
    if PIPELINE.is_terminal(p.state) or s.index != p.cursor:
        return []
    finals = {u: state.tasks[u].state for u in s.tasks}
    finals[t.uid] = outcome
    if not all(TASK.is_terminal(v) for v in finals.values()):
        return []
    failed = any(v is TaskState.FAILED for v in finals.values())
    recs = [record("STAGE", s.uid, StageState.FAILED if failed else StageState.DONE)]
    if failed and not state.continue_on_failure:
        # fail-fast: the pipeline stops at this stage boundary
        recs.append(record("PIPELINE", p.uid, PipelineState.FAILED, {"stage": s.uid}))
        recs += _cancel_stages(state, p, p.cursor + 1)
    elif p.cursor + 1 < len(p.stages):
        recs.append(record("PIPELINE", p.uid, "ADVANCE", {"cursor": p.cursor + 1}))
    else:
        recs.append(record("PIPELINE", p.uid, PipelineState.DONE))
    return recs


def _cancel_stages(state: AppManagerState, p: PipelineRecord, first: int) -> list[dict]:
    return [record("STAGE", u, StageState.CANCELED) for u in p.stages[first:]
            if not STAGE.is_terminal(state.stages[u].state)]


def control(state: AppManagerState, pipeline_uid: str, action: str) -> list[dict]:
    p = state.pipelines.get(pipeline_uid)
    if p is None:
        raise InvalidControl(f"no pipeline {pipeline_uid}")
    action = action.upper()
    if PIPELINE.is_terminal(p.state):
        raise InvalidControl(f"pipeline {pipeline_uid} is already {p.state.value}")
    if action == "SUSPEND":
        if p.control is not Control.RUNNING:
            raise InvalidControl(f"cannot suspend a {p.control.value} pipeline")
        return [record("PIPELINE", p.uid, "SUSPEND")]
    if action == "RESUME":
        if p.control is not Control.SUSPENDED:
            raise InvalidControl(f"cannot resume a {p.control.value} pipeline")
        return [record("PIPELINE", p.uid, "RESUME")]
    if action == "STOP":
        recs = [record("PIPELINE", p.uid, "STOP"), record("PIPELINE", p.uid, PipelineState.CANCELED)]
        return recs + _cancel_stages(state, p, p.cursor)
    raise InvalidControl(f"unknown control action {action!r}")


def add_stages(state: AppManagerState, pipeline_uid: str, stages) -> list[dict]:
    p = state.pipelines.get(pipeline_uid)
    if p is None:
        raise ValidationError("pipeline", f"no pipeline {pipeline_uid}")
    if PIPELINE.is_terminal(p.state):
        raise ImmutablePast(f"pipeline {pipeline_uid} is already {p.state.value}")
    stages = [stages] if isinstance(stages, Stage) else list(stages)
    _check_new(state, [s.uid for s in stages] + [t.uid for s in stages for t in s.tasks])
    for s in stages:
        if not s.tasks:
            raise ValidationError("tasks", f"stage {s.uid} has no tasks")
        for t in s.tasks:
            translate_task(t)
    return [record("PIPELINE", p.uid, "ADD_STAGE", {"stage": s.to_dict()}) for s in stages]


def add_tasks(state: AppManagerState, stage_uid: str, tasks) -> list[dict]:
    s = state.stages.get(stage_uid)
    if s is None:
        raise ValidationError("stage", f"no stage {stage_uid}")
    p = state.pipelines[s.pipeline]
    if s.state is not StageState.DESCRIBED or s.index < p.cursor or PIPELINE.is_terminal(p.state):
        raise ImmutablePast(f"stage {stage_uid} has already been dispatched")
    tasks = [tasks] if isinstance(tasks, Task) else list(tasks)
    _check_new(state, [t.uid for t in tasks])
    for t in tasks:
        translate_task(t)
    return [record("STAGE", s.uid, "ADD_TASK", {"task": t.to_dict()}) for t in tasks]


def add_pipelines(state: AppManagerState, pipelines, started: bool = True) -> list[dict]:
    from .entities import validate_workflow
    pipelines = validate_workflow(pipelines)
    _check_new(state, [p.uid for p in pipelines] + [s.uid for p in pipelines for s in p.stages]
               + [t.uid for p in pipelines for s in p.stages for t in s.tasks])
    recs = describe(pipelines)
    if started:
        recs += [record("PIPELINE", p.uid, PipelineState.SCHEDULING) for p in pipelines]
    return recs


def _check_new(state: AppManagerState, uids):
    seen = set()
    for uid in uids:
        if uid in state.tasks or uid in state.stages or uid in state.pipelines or uid in seen:
            raise ValidationError("uid", f"duplicate uid {uid}")
        seen.add(uid)


def _task(state: AppManagerState, uid: str) -> TaskRecord:
    t = state.tasks.get(uid)
    if t is None:
        raise UnknownTask(uid)
    return t
