"""Pipeline, Stage and Task: the workflow description objects.

A pipeline is an ordered list of stages; a stage is a set of tasks that
may all run concurrently; a task is one program run.

    t = Task()
    t.executable = "/bin/bash"
    t.arguments = ["-l", "-c", "..."]
    t.cpu_reqs = {"processes": 24, "process_type": ProcessType.MPI}
    s = Stage()
    s.add_tasks(t)
    p = Pipeline()
    p.add_stages(s)
"""

from __future__ import annotations

import itertools
from enum import Enum
from typing import Iterable, Mapping

from ..exceptions import UnsupportedRequirement, ValidationError
from ..model import StagingDirective, StagingMode, UnitDescription, validate_unit_description
from ..states import PipelineState, StageState, TaskState

_ids = {"task": itertools.count(), "stage": itertools.count(), "pipeline": itertools.count()}


def _uid(kind):
    return f"{kind}.{next(_ids[kind]):04d}"


class ProcessType(str, Enum):
    NONE = "NONE"
    PARALLEL = "PARALLEL"
    # the usual spelling in ensemble scripts
    MPI = "PARALLEL"


_REQ_KEYS = {"processes", "process_type", "threads_per_process"}
_TASK_FIELDS = {"uid", "executable", "arguments", "pre_exec", "copy_input_data", "link_input_data",
                "copy_output_data", "cpu_reqs", "gpu_reqs", "environment"}


def _listify(value) -> list:
    if value is None:
        return []
    if isinstance(value, (str, Mapping)):
        return [value]
    return list(value)


class Task:
    def __init__(self, uid: str | None = None, executable="", arguments=(), pre_exec=(),
                 copy_input_data=(), link_input_data=(), copy_output_data=(), cpu_reqs=None,
                 gpu_reqs=None, environment=None):
        self.uid = uid or _uid("task")
        self.executable = executable
        self.arguments = list(arguments)
        self.pre_exec = list(pre_exec)
        self.copy_input_data = list(copy_input_data)
        self.link_input_data = list(link_input_data)
        self.copy_output_data = list(copy_output_data)
        self.cpu_reqs = dict(cpu_reqs or {"processes": 1, "process_type": ProcessType.NONE})
        self.gpu_reqs = dict(gpu_reqs or {"processes": 0, "process_type": ProcessType.NONE})
        self.environment = dict(environment or {})
        self.state = TaskState.SPECIFIED

    def __repr__(self):
        return f"<Task {self.uid} {self.state.value}>"

    @property
    def exe(self) -> str:
        # accept the list form ``t.executable = ['/bin/date']``
        exe = self.executable
        if isinstance(exe, (list, tuple)):
            if len(exe) != 1:
                raise ValidationError("executable", f"expected one executable, got {exe!r}")
            exe = exe[0]
        return exe

    def to_dict(self) -> dict:
        return {
            "uid": self.uid,
            "executable": self.exe,
            "arguments": [str(a) for a in self.arguments],
            "pre_exec": list(self.pre_exec),
            "copy_input_data": [str(d) for d in self.copy_input_data],
            "link_input_data": [str(d) for d in self.link_input_data],
            "copy_output_data": [str(d) for d in self.copy_output_data],
            "cpu_reqs": _reqs_to_dict(self.cpu_reqs),
            "gpu_reqs": _reqs_to_dict(self.gpu_reqs),
            "environment": dict(self.environment),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Task":
        data = dict(data)
        unknown = set(data) - _TASK_FIELDS - {"state"}
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown task field")
        data.pop("state", None)
        return cls(**data)

    def validate(self) -> "Task":
        translate_task(self)
        return self


def _reqs_to_dict(reqs: Mapping) -> dict:
    d = dict(reqs)
    if "process_type" in d and d["process_type"] is not None:
        d["process_type"] = getattr(d["process_type"], "value", d["process_type"])
    return d


class Stage:
    def __init__(self, uid: str | None = None, tasks: Iterable[Task] = ()):
        self.uid = uid or _uid("stage")
        self.tasks: list[Task] = []
        self.state = StageState.DESCRIBED
        self.add_tasks(list(tasks))

    def __repr__(self):
        return f"<Stage {self.uid} tasks={len(self.tasks)}>"

    def add_tasks(self, tasks):
        tasks = [tasks] if isinstance(tasks, Task) else list(tasks)
        for t in tasks:
            if not isinstance(t, Task):
                raise TypeError(f"expected a Task, got {t!r}")
            if any(t.uid == x.uid for x in self.tasks):
                raise ValidationError("uid", f"duplicate task uid {t.uid}")
        self.tasks.extend(tasks)

    def to_dict(self) -> dict:
        return {"uid": self.uid, "tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Stage":
        return cls(data.get("uid"), [Task.from_dict(t) for t in data.get("tasks", [])])


class Pipeline:
    def __init__(self, uid: str | None = None, stages: Iterable[Stage] = ()):
        self.uid = uid or _uid("pipeline")
        self.stages: list[Stage] = []
        self.state = PipelineState.DESCRIBED
        self.add_stages(list(stages))

    def __repr__(self):
        return f"<Pipeline {self.uid} stages={len(self.stages)}>"

    def add_stages(self, stages):
        stages = [stages] if isinstance(stages, Stage) else list(stages)
        for s in stages:
            if not isinstance(s, Stage):
                raise TypeError(f"expected a Stage, got {s!r}")
        self.stages.extend(stages)

    def to_dict(self) -> dict:
        return {"uid": self.uid, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Pipeline":
        return cls(data.get("uid"), [Stage.from_dict(s) for s in data.get("stages", [])])


def validate_workflow(pipelines) -> list[Pipeline]:
    """Check structure and uid uniqueness; return the pipelines as a list."""
    pipelines = [pipelines] if isinstance(pipelines, Pipeline) else list(pipelines)
    if not pipelines:
        raise ValidationError("workflow", "a workflow needs at least one pipeline")
    seen = set()
    for p in pipelines:
        if not isinstance(p, Pipeline):
            raise ValidationError("workflow", f"expected a Pipeline, got {p!r}")
        if not p.stages:
            raise ValidationError("stages", f"pipeline {p.uid} has no stages")
        for s in p.stages:
            if not s.tasks:
                raise ValidationError("tasks", f"stage {s.uid} of {p.uid} has no tasks")
            for t in s.tasks:
                t.validate()
        for uid in [p.uid] + [s.uid for s in p.stages] + [t.uid for s in p.stages for t in s.tasks]:
            if uid in seen:
                raise ValidationError("uid", f"duplicate uid {uid}")
            seen.add(uid)
    return pipelines


def _count(reqs: Mapping, what: str, minimum: int) -> tuple[int, bool]:
    unknown = set(reqs) - _REQ_KEYS
    if unknown:
        raise UnsupportedRequirement(f"{what}: unsupported key(s) {sorted(unknown)}")
    n = reqs.get("processes", minimum)
    threads = reqs.get("threads_per_process", 1) or 1
    if isinstance(n, bool) or not isinstance(n, int) or n < minimum:
        raise UnsupportedRequirement(f"{what}: processes must be an integer >= {minimum}, got {n!r}")
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise UnsupportedRequirement(f"{what}: threads_per_process must be a positive integer")
    ptype = reqs.get("process_type") or ProcessType.NONE
    try:
        ptype = ProcessType(getattr(ptype, "value", ptype))
    except ValueError:
        raise UnsupportedRequirement(f"{what}: unknown process_type {ptype!r}") from None
    return n * threads, ptype is ProcessType.PARALLEL


def translate_task(task) -> UnitDescription:
    """Map a task onto the unit description that runs it.

    processes x threads_per_process become cores, a PARALLEL process type
    becomes an MPI unit, copy/link input data become COPY/LINK input
    staging and copy_output_data becomes output staging. The unit is named
    after the task uid.
    """
    if isinstance(task, Mapping):
        task = Task.from_dict(task)
    cores, mpi = _count(task.cpu_reqs, "cpu_reqs", 1)
    gpus, gpu_mpi = _count(task.gpu_reqs, "gpu_reqs", 0)
    if gpu_mpi and not mpi and gpus > 0:
        raise UnsupportedRequirement("PARALLEL gpu processes need PARALLEL cpu processes")
    inputs = [StagingDirective.parse(d, StagingMode.COPY) for d in _listify(task.copy_input_data)]
    inputs += [StagingDirective.parse(d, StagingMode.LINK) for d in _listify(task.link_input_data)]
    outputs = [StagingDirective.parse(d, StagingMode.COPY) for d in _listify(task.copy_output_data)]
    try:
        return validate_unit_description(UnitDescription(
            executable=task.exe,
            arguments=tuple(str(a) for a in task.arguments),
            pre_exec=tuple(task.pre_exec),
            input_staging=tuple(inputs),
            output_staging=tuple(outputs),
            cores=cores,
            gpus=gpus,
            mpi=mpi,
            environment=dict(task.environment),
            name=task.uid,
        ))
    except ValidationError as exc:
        raise ValidationError(exc.field, f"task {task.uid}: {exc.message}") from None
