"""Slot table and first-fit placement.

Placement rules:

* non-MPI requests must fit on a single node: the lowest-index node with
  enough free cores and gpus is chosen, and its lowest-index free slots
  are taken;
* MPI requests are filled greedily in scan order: lowest-index free cores
  of the first node with free cores, spilling over to the following
  nodes; gpus are filled the same way, independently of cores.

A request that can never fit raises ImpossibleRequest; one that does not
fit right now returns None and leaves the table untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from ..exceptions import DoubleRelease, ImpossibleRequest


class Slot(str, Enum):
    FREE = "FREE"
    BUSY = "BUSY"


@dataclass
class Node:
    name: str
    cores: list
    gpus: list = field(default_factory=list)

    def __post_init__(self):
        self.free_cores = self.cores.count(Slot.FREE)
        self.free_gpus = self.gpus.count(Slot.FREE)

    @classmethod
    def empty(cls, name, cores, gpus=0) -> "Node":
        return cls(name, [Slot.FREE] * cores, [Slot.FREE] * gpus)

    def _take(self, kind, n) -> tuple:
        slots = self.cores if kind == "cores" else self.gpus
        taken = []
        for i, s in enumerate(slots):
            if len(taken) == n:
                break
            if s is Slot.FREE:
                taken.append(i)
        return tuple(taken)


@dataclass(frozen=True)
class SlotRequest:
    cores: int
    gpus: int = 0
    mpi: bool = False
    unit_id: str = ""


@dataclass(frozen=True)
class NodeAssignment:
    node: str
    cores: tuple = ()
    gpus: tuple = ()


@dataclass(frozen=True)
class Placement:
    unit_id: str
    node_assignments: tuple

    @property
    def cores(self) -> int:
        return sum(len(a.cores) for a in self.node_assignments)

    @property
    def gpus(self) -> int:
        return sum(len(a.gpus) for a in self.node_assignments)

    @property
    def nodes(self) -> list[str]:
        return [a.node for a in self.node_assignments]

    def to_dict(self) -> dict:
        return {"unit_id": self.unit_id,
                "node_assignments": [{"node": a.node, "cores": list(a.cores), "gpus": list(a.gpus)}
                                     for a in self.node_assignments]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Placement":
        return cls(data["unit_id"], tuple(NodeAssignment(a["node"], tuple(a["cores"]), tuple(a["gpus"]))
                                          for a in data["node_assignments"]))


class SlotTable:
    def __init__(self, nodes: list[Node]):
        self.nodes = nodes
        self._index = {n.name: i for i, n in enumerate(nodes)}
        self.held: dict[str, Placement] = {}
        self._anon = 0

    @classmethod
    def uniform(cls, nodes: int, cores_per_node: int, gpus_per_node: int = 0) -> "SlotTable":
        return cls([Node.empty(f"node{i:04d}", cores_per_node, gpus_per_node) for i in range(nodes)])

    @classmethod
    def for_pilot(cls, cores: int, gpus: int, cores_per_node: int, gpus_per_node: int = 0) -> "SlotTable":
        """Just enough nodes for the pilot; the last node may be partial."""
        n = max(math.ceil(cores / cores_per_node),
                math.ceil(gpus / gpus_per_node) if gpus and gpus_per_node else 0, 1)
        nodes = []
        for i in range(n):
            c = max(0, min(cores_per_node, cores - i * cores_per_node))
            g = max(0, min(gpus_per_node, gpus - i * gpus_per_node))
            nodes.append(Node.empty(f"node{i:04d}", c, g))
        return cls(nodes)

    @property
    def total_cores(self) -> int:
        return sum(len(n.cores) for n in self.nodes)

    @property
    def total_gpus(self) -> int:
        return sum(len(n.gpus) for n in self.nodes)

    @property
    def free_cores(self) -> int:
        return sum(n.free_cores for n in self.nodes)

    @property
    def free_gpus(self) -> int:
        return sum(n.free_gpus for n in self.nodes)

    @property
    def busy_cores(self) -> int:
        return sum(n.cores.count(Slot.BUSY) for n in self.nodes)

    @property
    def busy_gpus(self) -> int:
        return sum(n.gpus.count(Slot.BUSY) for n in self.nodes)

    def node(self, name: str) -> Node:
        return self.nodes[self._index[name]]

    def conserved(self) -> bool:
        """BUSY slots equal the slots of held placements and never exceed the table."""
        held_c = sum(p.cores for p in self.held.values())
        held_g = sum(p.gpus for p in self.held.values())
        busy_c, busy_g = self.busy_cores, self.busy_gpus
        return busy_c == held_c <= self.total_cores and busy_g == held_g <= self.total_gpus

    def snapshot(self) -> tuple:
        return tuple((n.name, tuple(n.cores), tuple(n.gpus)) for n in self.nodes)

    def summary(self) -> dict:
        return {"nodes": len(self.nodes), "cores": self.total_cores, "gpus": self.total_gpus,
                "busy_cores": self.busy_cores, "busy_gpus": self.busy_gpus}

    def _mark(self, placement: Placement, state: Slot):
        for a in placement.node_assignments:
            node = self.node(a.node)
            for i in a.cores:
                node.cores[i] = state
            for i in a.gpus:
                node.gpus[i] = state
            delta = -1 if state is Slot.BUSY else 1
            node.free_cores += delta * len(a.cores)
            node.free_gpus += delta * len(a.gpus)


def _request(req) -> SlotRequest:
    if isinstance(req, SlotRequest):
        return req
    if isinstance(req, Mapping):
        return SlotRequest(int(req["cores"]), int(req.get("gpus", 0)), bool(req.get("mpi", False)),
                           str(req.get("unit_id", "")))
    raise TypeError(f"cannot interpret slot request {req!r}")


def allocate_slots(req, table: SlotTable) -> Placement | None:
    """First-fit placement of ``req`` on ``table``; None when it does not fit now."""
    req = _request(req)
    if req.cores < 1:
        raise ValueError("a request needs at least one core")
    if req.gpus < 0:
        raise ValueError("gpu count must be >= 0")
    if req.unit_id and req.unit_id in table.held:
        raise ValueError(f"unit {req.unit_id} already holds a placement")
    if req.cores > table.total_cores or req.gpus > table.total_gpus:
        raise ImpossibleRequest(f"{req.cores} cores/{req.gpus} gpus exceed the table "
                                f"({table.total_cores} cores/{table.total_gpus} gpus)")
    if not req.mpi and not any(len(n.cores) >= req.cores and len(n.gpus) >= req.gpus
                               for n in table.nodes):
        raise ImpossibleRequest(f"no single node can hold {req.cores} cores/{req.gpus} gpus")

    if req.mpi:
        assignments = _spill(req, table)
    else:
        assignments = None
        for node in table.nodes:
            if node.free_cores >= req.cores and node.free_gpus >= req.gpus:
                assignments = (NodeAssignment(node.name, node._take("cores", req.cores),
                                              node._take("gpus", req.gpus)),)
                break
    if assignments is None:
        return None
    unit_id = req.unit_id or f"anonymous.{table._anon}"
    table._anon += 1
    placement = Placement(unit_id, assignments)
    table._mark(placement, Slot.BUSY)
    table.held[unit_id] = placement
    return placement


def _spill(req: SlotRequest, table: SlotTable):
    if table.free_cores < req.cores or table.free_gpus < req.gpus:
        return None
    need_c, need_g = req.cores, req.gpus
    out = []
    for node in table.nodes:
        if need_c == 0 and need_g == 0:
            break
        c = node._take("cores", min(need_c, node.free_cores)) if need_c else ()
        g = node._take("gpus", min(need_g, node.free_gpus)) if need_g else ()
        if c or g:
            out.append(NodeAssignment(node.name, c, g))
            need_c -= len(c)
            need_g -= len(g)
    return tuple(out)


def release_slots(placement: Placement, table: SlotTable) -> SlotTable:
    held = table.held.get(placement.unit_id)
    if held is None or held != placement:
        raise DoubleRelease(f"placement of {placement.unit_id!r} is not held")
    for a in placement.node_assignments:
        node = table.node(a.node)
        if any(node.cores[i] is not Slot.BUSY for i in a.cores) or \
                any(node.gpus[i] is not Slot.BUSY for i in a.gpus):
            raise DoubleRelease(f"slots of {placement.unit_id!r} are already free")
    table._mark(placement, Slot.FREE)
    del table.held[placement.unit_id]
    return table
