"""Resource configurations.

One JSON file per named resource. Lookup order: an explicit directory,
then ``$PILOTKIT_CONFIG_DIR``, then the configurations bundled with the
package.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

from .exceptions import UnknownResource, ValidationError

CONFIG_ENV = "PILOTKIT_CONFIG_DIR"
BUILTIN_DIR = Path(__file__).parent / "data"


class AgentLaunch(str, Enum):
    IN_PROCESS = "IN_PROCESS"
    SUBPROCESS = "SUBPROCESS"


@dataclass(frozen=True)
class QueueWait:
    """Queue-wait distribution: ``fixed`` seconds or ``uniform`` in [low, high]."""

    kind: str = "fixed"
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValidationError("queue_wait", f"unknown distribution {self.kind!r}")
        if self.low < 0 or self.high < 0:
            raise ValidationError("queue_wait", "wait values must be >= 0")
        if self.kind == "uniform" and self.high < self.low:
            raise ValidationError("queue_wait", "uniform wait needs low <= high")

    @classmethod
    def fixed(cls, seconds: float) -> "QueueWait":
        return cls("fixed", float(seconds), float(seconds))

    @classmethod
    def uniform(cls, low: float, high: float) -> "QueueWait":
        return cls("uniform", float(low), float(high))

    def sample(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            return self.low
        return rng.uniform(self.low, self.high)

    @classmethod
    def from_value(cls, value) -> "QueueWait":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, float)):
            return cls.fixed(value)
        if isinstance(value, Mapping):
            if "fixed" in value:
                return cls.fixed(value["fixed"])
            if "uniform" in value:
                low, high = value["uniform"]
                return cls.uniform(low, high)
        raise ValidationError("queue_wait", f"cannot interpret {value!r}")

    def to_value(self):
        if self.kind == "fixed":
            return {"fixed": self.low}
        return {"uniform": [self.low, self.high]}


@dataclass(frozen=True)
class BatchSimConfig:
    queue_wait: QueueWait = field(default_factory=QueueWait)
    max_concurrent_jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_concurrent_jobs < 1:
            raise ValidationError("max_concurrent_jobs", "must be >= 1")

    @classmethod
    def from_dict(cls, data: Mapping) -> "BatchSimConfig":
        return cls(
            queue_wait=QueueWait.from_value(data.get("queue_wait", 0)),
            max_concurrent_jobs=int(data.get("max_concurrent_jobs", 1)),
            seed=int(data.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {"queue_wait": self.queue_wait.to_value(),
                "max_concurrent_jobs": self.max_concurrent_jobs, "seed": self.seed}


@dataclass(frozen=True)
class ResourceConfig:
    name: str
    nodes: int
    cores_per_node: int
    gpus_per_node: int = 0
    agent_launch: AgentLaunch = AgentLaunch.SUBPROCESS
    batch: BatchSimConfig | None = None
    launch_templates: Mapping[str, str] = field(default_factory=lambda: {"DIRECT": "{EXE} {ARGS}"})
    environment: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.nodes < 1 or self.cores_per_node < 1:
            raise ValidationError("nodes", "nodes * cores_per_node must be >= 1")
        if self.gpus_per_node < 0:
            raise ValidationError("gpus_per_node", "must be >= 0")
        if "DIRECT" not in self.launch_templates:
            raise ValidationError("launch_templates", "a DIRECT template is required")
        object.__setattr__(self, "agent_launch", AgentLaunch(self.agent_launch))

    @property
    def total_cores(self) -> int:
        return self.nodes * self.cores_per_node

    @property
    def total_gpus(self) -> int:
        return self.nodes * self.gpus_per_node

    def nodes_for(self, cores: int, gpus: int = 0) -> int:
        need = math.ceil(cores / self.cores_per_node)
        if gpus and self.gpus_per_node:
            need = max(need, math.ceil(gpus / self.gpus_per_node))
        return need

    @classmethod
    def from_dict(cls, data: Mapping) -> "ResourceConfig":
        cpn = data["cores_per_node"]
        if cpn == "auto":
            cpn = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
        batch = data.get("batch")
        return cls(
            name=data["name"],
            nodes=int(data.get("nodes", 1)),
            cores_per_node=int(cpn),
            gpus_per_node=int(data.get("gpus_per_node", 0)),
            agent_launch=AgentLaunch(data.get("agent_launch", "SUBPROCESS")),
            batch=BatchSimConfig.from_dict(batch) if batch is not None else None,
            launch_templates=dict(data.get("launch_templates", {"DIRECT": "{EXE} {ARGS}"})),
            environment={str(k): str(v) for k, v in data.get("environment", {}).items()},
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "nodes": self.nodes,
            "cores_per_node": self.cores_per_node,
            "gpus_per_node": self.gpus_per_node,
            "agent_launch": self.agent_launch.value,
            "batch": self.batch.to_dict() if self.batch else None,
            "launch_templates": dict(self.launch_templates),
            "environment": dict(self.environment),
        }


def _search_path(config_dir=None) -> list[Path]:
    dirs = []
    if config_dir:
        dirs.append(Path(config_dir))
    if os.environ.get(CONFIG_ENV):
        dirs.append(Path(os.environ[CONFIG_ENV]))
    dirs.append(BUILTIN_DIR)
    return dirs


def load_resource_config(name: str, config_dir=None) -> ResourceConfig:
    for d in _search_path(config_dir):
        path = d / f"{name}.json"
        if path.is_file():
            data = json.loads(path.read_text())
            data.setdefault("name", name)
            return ResourceConfig.from_dict(data)
    raise UnknownResource(name)


def list_resources(config_dir=None) -> list[str]:
    names = set()
    for d in _search_path(config_dir):
        if d.is_dir():
            names.update(p.stem for p in d.glob("*.json"))
    return sorted(names)
