"""Declarative workload files for the command line.

A workload is JSON (or YAML, read as a superset) in one of two modes.

UNITS describes a pilot and a flat list of units::

    {"mode": "UNITS",
     "pilot": {"resource": "sim-3072", "cores": 3072, "runtime": 30},
     "units": [{"executable": "/bin/sleep", "arguments": ["1"],
                "cores": 24, "mpi": true, "count": 128}],
     "options": {"policy": "ROUND_ROBIN"}}

ENSEMBLE describes a resource request and a pipeline tree::

    {"mode": "ENSEMBLE",
     "resource_desc": {"resource": "local", "walltime": 10, "cpus": 4},
     "pipelines": [{"stages": [{"tasks": [{"executable": "/bin/date", "count": 4}]}]}],
     "options": {"continue_on_failure": false}}

``count`` on a unit or task repeats it; a repeated task uid gets a
``.<i>`` suffix.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .ensemble.entities import Pipeline, Stage, Task, validate_workflow
from .exceptions import ValidationError
from .model import PilotDescription, UnitDescription, validate_unit_description


class WorkloadMode(str, Enum):
    UNITS = "UNITS"
    ENSEMBLE = "ENSEMBLE"


OPTION_KEYS = {"policy", "seed", "executors", "continue_on_failure", "timeout", "stagers"}


@dataclass
class Workload:
    mode: WorkloadMode
    pilot: dict | None = None
    resource_desc: dict | None = None
    units: list[dict] = field(default_factory=list)
    pipelines: list[dict] = field(default_factory=list)
    options: dict[str, Any] = field(default_factory=dict)

    @property
    def resource(self) -> str:
        section = self.pilot if self.mode is WorkloadMode.UNITS else self.resource_desc
        return section["resource"]

    def pilot_description(self, cores_default: int) -> PilotDescription:
        d = dict(self.pilot)
        d.setdefault("cores", cores_default)
        d.setdefault("runtime", 60)
        unknown = set(d) - set(PilotDescription.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"pilot.{sorted(unknown)[0]}", "unknown pilot field")
        return PilotDescription.from_dict(d).validate()

    def unit_descriptions(self) -> list[UnitDescription]:
        out = []
        for i, raw in enumerate(self.units):
            d = dict(raw)
            count = _count(d.pop("count", 1), f"units[{i}].count")
            for key in ("arguments", "pre_exec", "input_staging", "output_staging"):
                if key in d:
                    d[key] = tuple(d[key])
            try:
                cud = validate_unit_description(UnitDescription.from_dict(d))
            except ValidationError as exc:
                raise ValidationError(f"units[{i}].{exc.field}", exc.message) from None
            out.extend([cud] * count)
        return out

    def workflow(self) -> list[Pipeline]:
        pipelines = []
        for p in self.pipelines:
            stages = []
            for s in p.get("stages", []):
                tasks = []
                for t in s.get("tasks", []):
                    t = dict(t)
                    n = _count(t.pop("count", 1), "task count")
                    uid = t.pop("uid", None)
                    for k in range(n):
                        name = f"{uid}.{k}" if uid and n > 1 else uid
                        tasks.append(Task.from_dict({**copy.deepcopy(t), "uid": name}))
                stages.append(Stage(s.get("uid"), tasks))
            pipelines.append(Pipeline(p.get("uid"), stages))
        return validate_workflow(pipelines)


def _count(value, where) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ValidationError(where, f"expected a non-negative integer, got {value!r}")
    return value


def parse_workload(data: Mapping) -> Workload:
    if not isinstance(data, Mapping):
        raise ValidationError("workload", "expected a mapping at the top level")
    has_units, has_pipes = "units" in data, "pipelines" in data
    if has_units == has_pipes:
        raise ValidationError("workload", "exactly one of 'units' or 'pipelines' is required")
    mode = data.get("mode") or ("UNITS" if has_units else "ENSEMBLE")
    try:
        mode = WorkloadMode(str(mode).upper())
    except ValueError:
        raise ValidationError("mode", f"unknown mode {mode!r}") from None
    if (mode is WorkloadMode.UNITS) != has_units:
        raise ValidationError("mode", f"mode {mode.value} does not match the workload body")
    options = dict(data.get("options") or {})
    unknown = set(options) - OPTION_KEYS
    if unknown:
        raise ValidationError(f"options.{sorted(unknown)[0]}", "unknown option")

    if mode is WorkloadMode.UNITS:
        pilot = data.get("pilot")
        if not isinstance(pilot, Mapping) or not pilot.get("resource"):
            raise ValidationError("pilot", "a pilot section with a resource is required")
        units = data["units"] or []
        if not isinstance(units, list) or not all(isinstance(u, Mapping) for u in units):
            raise ValidationError("units", "expected a list of unit descriptions")
        wl = Workload(mode, pilot=dict(pilot), units=[dict(u) for u in units], options=options)
        wl.unit_descriptions()
    else:
        rd = data.get("resource_desc")
        if not isinstance(rd, Mapping) or not rd.get("resource"):
            raise ValidationError("resource_desc", "a resource_desc section with a resource is required")
        pipes = data["pipelines"]
        if not isinstance(pipes, list):
            raise ValidationError("pipelines", "expected a list of pipelines")
        wl = Workload(mode, resource_desc=dict(rd), pipelines=list(pipes), options=options)
        wl.workflow()
    return wl


def load_workload(path) -> Workload:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError("workload", f"cannot read {path}: {exc.strerror}") from None
    if path.suffix in (".yaml", ".yml"):
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ValidationError("workload", f"{path}: {exc}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError("workload", f"{path}:{exc.lineno}: {exc.msg}") from None
    return parse_workload(data)
