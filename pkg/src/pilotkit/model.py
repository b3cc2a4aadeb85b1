"""Descriptions, live entity handles and the Event record."""

from __future__ import annotations

import json
import os
import posixpath
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping

from .exceptions import ValidationError
from .states import PilotState, UnitState


class EntityKind(str, Enum):
    PILOT = "PILOT"
    UNIT = "UNIT"
    TASK = "TASK"
    STAGE = "STAGE"
    PIPELINE = "PIPELINE"
    COMPONENT = "COMPONENT"


class StagingMode(str, Enum):
    COPY = "COPY"
    LINK = "LINK"
    MOVE = "MOVE"


def is_safe_relative(path: str) -> bool:
    """True for a relative path that stays inside its base directory."""
    if not path or os.path.isabs(path) or path.startswith("~"):
        return False
    norm = posixpath.normpath(path.replace(os.sep, "/"))
    return not (norm == ".." or norm.startswith("../") or norm == ".")


@dataclass(frozen=True)
class StagingDirective:
    source: str
    destination: str
    mode: StagingMode = StagingMode.COPY

    @classmethod
    def parse(cls, value, default_mode=StagingMode.COPY) -> "StagingDirective":
        """Accept a directive, a mapping, ``"src"`` or ``"src > dst"``."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            if ">" in value:
                src, dst = (part.strip() for part in value.split(">", 1))
            else:
                src = value.strip()
                dst = os.path.basename(src.rstrip("/"))
            return cls(src, dst, StagingMode(default_mode))
        if isinstance(value, Mapping):
            src = value["source"]
            dst = value.get("destination") or os.path.basename(str(src).rstrip("/"))
            return cls(str(src), str(dst), StagingMode(value.get("mode", default_mode)))
        raise TypeError(f"cannot interpret staging directive {value!r}")

    def to_dict(self) -> dict:
        return {"source": self.source, "destination": self.destination, "mode": self.mode.value}


@dataclass(frozen=True)
class PilotDescription:
    resource: str
    cores: int
    runtime: int
    gpus: int = 0
    project: str | None = None
    queue: str | None = None
    access_schema: str | None = None

    def validate(self) -> "PilotDescription":
        if not isinstance(self.resource, str) or not self.resource:
            raise ValidationError("resource", "a resource name is required")
        _check_int("cores", self.cores, 1)
        _check_int("runtime", self.runtime, 1)
        _check_int("gpus", self.gpus, 0)
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PilotDescription":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


@dataclass(frozen=True)
class UnitDescription:
    executable: str = ""
    arguments: tuple = ()
    pre_exec: tuple = ()
    input_staging: tuple = ()
    output_staging: tuple = ()
    cores: int = 1
    gpus: int = 0
    mpi: bool = False
    environment: Mapping[str, str] = field(default_factory=dict)
    name: str | None = None

    def to_dict(self) -> dict:
        return {
            "executable": self.executable,
            "arguments": list(self.arguments),
            "pre_exec": list(self.pre_exec),
            "input_staging": [StagingDirective.parse(d).to_dict() for d in self.input_staging],
            "output_staging": [StagingDirective.parse(d).to_dict() for d in self.output_staging],
            "cores": self.cores,
            "gpus": self.gpus,
            "mpi": self.mpi,
            "environment": dict(self.environment),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "UnitDescription":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown unit description field")
        return cls(**dict(data))


def _check_int(name, value, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(name, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(name, f"must be >= {minimum}, got {value}")


def _str_tuple(name, values) -> tuple:
    if isinstance(values, str):
        raise ValidationError(name, "expected a list of strings, got a single string")
    try:
        return tuple(str(v) for v in values)
    except TypeError:
        raise ValidationError(name, f"expected a list, got {values!r}") from None


def validate_unit_description(cud) -> UnitDescription:
    """Check a unit description and return its normalized form.

    Normalization fills defaults, turns lists into tuples and staging
    shorthands into StagingDirective values. Validating an already
    validated description returns an equal description.
    """
    if isinstance(cud, Mapping):
        cud = UnitDescription.from_dict(cud)
    if not isinstance(cud.executable, str) or not cud.executable.strip():
        raise ValidationError("executable", "executable must be a non-empty string")
    _check_int("cores", cud.cores, 1)
    _check_int("gpus", cud.gpus, 0)
    if not isinstance(cud.mpi, bool):
        raise ValidationError("mpi", f"expected a boolean, got {cud.mpi!r}")

    staging = {}
    for name, sandbox_side in (("input_staging", "destination"), ("output_staging", "source")):
        seen = set()
        directives = []
        for raw in _as_list(name, getattr(cud, name)):
            try:
                d = StagingDirective.parse(raw)
            except (TypeError, KeyError, ValueError) as exc:
                raise ValidationError(name, str(exc)) from None
            inside = getattr(d, sandbox_side)
            if not is_safe_relative(inside):
                raise ValidationError(name, f"{inside!r} escapes the unit sandbox")
            key = posixpath.normpath(inside)
            if key in seen:
                raise ValidationError(name, f"duplicate sandbox path {inside!r}")
            seen.add(key)
            directives.append(d)
        staging[name] = tuple(directives)

    env = cud.environment or {}
    if not isinstance(env, Mapping):
        raise ValidationError("environment", "expected a mapping")
    return replace(
        cud,
        executable=cud.executable,
        arguments=_str_tuple("arguments", cud.arguments),
        pre_exec=_str_tuple("pre_exec", cud.pre_exec),
        input_staging=staging["input_staging"],
        output_staging=staging["output_staging"],
        environment={str(k): str(v) for k, v in env.items()},
    )


def _as_list(name, value):
    if value is None:
        return []
    if isinstance(value, (str, Mapping, StagingDirective)):
        return [value]
    try:
        return list(value)
    except TypeError:
        raise ValidationError(name, f"expected a list, got {value!r}") from None


@dataclass
class Pilot:
    id: str
    description: PilotDescription
    state: PilotState = PilotState.NEW
    job_handle: Any = None
    slot_table_snapshot: dict | None = None
    error: str | None = None

    @property
    def cores(self) -> int:
        return self.description.cores

    @property
    def gpus(self) -> int:
        return self.description.gpus


@dataclass
class Unit:
    id: str
    description: UnitDescription
    state: UnitState = UnitState.NEW
    pilot_id: str | None = None
    placement: dict | None = None
    exit_code: int | None = None
    sandbox: str | None = None
    error: str | None = None


@dataclass(frozen=True)
class Event:
    """A timestamped state-transition (or other notable) record."""

    entity_kind: EntityKind
    entity_id: str
    event_name: str
    component: str
    payload: dict | None = None
    ts: int = field(default_factory=time.monotonic_ns)
    wall: float = field(default_factory=time.time)
    seq: int | None = None

    @property
    def time(self) -> float:
        """Monotonic timestamp in seconds."""
        return self.ts / 1e9

    def to_dict(self) -> dict:
        d = {
            "ts": self.ts,
            "wall": self.wall,
            "entity_kind": EntityKind(self.entity_kind).value,
            "entity_id": self.entity_id,
            "event_name": getattr(self.event_name, "value", self.event_name),
            "component": self.component,
            "payload": self.payload,
        }
        if self.seq is not None:
            d["seq"] = self.seq
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "Event":
        return cls(
            entity_kind=EntityKind(data["entity_kind"]),
            entity_id=data["entity_id"],
            event_name=data["event_name"],
            component=data.get("component", ""),
            payload=data.get("payload"),
            ts=int(data["ts"]),
            wall=float(data.get("wall", 0.0)),
            seq=data.get("seq"),
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        return cls.from_dict(json.loads(line))
