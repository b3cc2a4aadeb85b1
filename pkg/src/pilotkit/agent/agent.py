"""The per-pilot agent.

An agent owns the pilot's slot table and pushes every unit it receives
through StagerInput -> Scheduler -> Executor -> StagerOutput. Units arrive
over the session bridge inbox; state events leave through the outbox.

All components are threads of one process. Units run as child processes
started without blocking; a watcher thread reaps them, so the number of
concurrently executing units is bounded only by the slot table.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..exceptions import ImpossibleRequest, PilotkitError
from ..mesh import Queue, QueueClosed
from ..model import EntityKind, Event, StagingDirective, UnitDescription
from ..resources import ResourceConfig
from ..states import UnitState
from ..store import CURSORS, INBOX, OUTBOX, CursorFile, PersistentQueue
from .launch import build_launch_command, kill_process_group, spawn
from .slots import SlotRequest, SlotTable, allocate_slots, release_slots
from .staging import collect_outputs, link_inputs

log = logging.getLogger(__name__)


def pilot_dir(session_dir, pilot_id) -> Path:
    return Path(session_dir) / pilot_id


def staging_dir(session_dir, pilot_id) -> Path:
    return pilot_dir(session_dir, pilot_id) / "staging"


def sandbox_dir(session_dir, pilot_id, unit_id) -> Path:
    return pilot_dir(session_dir, pilot_id) / unit_id


@dataclass
class AgentConfig:
    pilot_id: str
    session_dir: str
    resource: ResourceConfig
    cores: int
    gpus: int = 0
    walltime: float | None = None
    executors: int = field(default_factory=lambda: os.cpu_count() or 1)
    stagers: int = 1
    audit: bool = False
    poll: float = 0.005

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resource"] = self.resource.to_dict()
        return d

    @classmethod
    def from_dict(cls, data) -> "AgentConfig":
        data = dict(data)
        data["resource"] = ResourceConfig.from_dict(data["resource"])
        return cls(**data)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "AgentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AgentUnit:
    id: str
    description: UnitDescription
    sandbox: Path
    inputs: list
    outputs: list
    placement: object = None
    process: object = None
    cancel_reason: str | None = None


class Agent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.pid = config.pilot_id
        self.name = f"agent.{self.pid}"
        session = Path(config.session_dir)
        cursors = CursorFile(session / CURSORS)
        self.inbox = PersistentQueue(session / INBOX, cursors)
        self.outbox = PersistentQueue(session / OUTBOX, cursors)
        rc = config.resource
        self.table = SlotTable.for_pilot(config.cores, config.gpus, rc.cores_per_node, rc.gpus_per_node)

        self._q_stage_in = Queue("stage_in")
        self._q_sched = Queue("schedule")
        self._q_exec = Queue("execute")
        self._q_stage_out = Queue("stage_out")
        self._q_events = Queue("events")

        self._lock = threading.Lock()
        self._active: dict[str, AgentUnit] = {}
        self._running: dict[str, AgentUnit] = {}
        self._closing: str | None = None
        self._halt = threading.Event()
        self._done = threading.Event()
        self._threads: list[threading.Thread] = []
        self._timer = None

        # scheduler audit
        self.checks = 0
        self.violations = 0
        self.observer = None

    # -- events ------------------------------------------------------------

    def _emit(self, kind, entity_id, name, payload=None, component="agent"):
        ev = Event(kind, entity_id, getattr(name, "value", name), f"{self.name}.{component}", payload)
        try:
            self._q_events.put({"type": "event", "target": "client", "pilot": self.pid,
                                "event": ev.to_dict()})
        except QueueClosed:
            log.warning("%s: event after shutdown dropped: %s %s", self.name, entity_id, name)

    def _unit_event(self, au: AgentUnit, state: UnitState, payload=None, component="agent"):
        self._emit(EntityKind.UNIT, au.id, state, payload, component)

    def _finish(self, au: AgentUnit, state: UnitState, payload=None, component="agent"):
        self._unit_event(au, state, payload, component)
        with self._lock:
            self._active.pop(au.id, None)
        self._maybe_exit()

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        self._spawn(self._receiver, "receiver")
        for i in range(max(1, self.config.stagers)):
            self._spawn(self._stage_in_worker, f"stager_in.{i}")
            self._spawn(self._stage_out_worker, f"stager_out.{i}")
        self._spawn(self._scheduler, "scheduler")
        for i in range(max(1, self.config.executors)):
            self._spawn(self._executor, f"executor.{i}")
        self._spawn(self._watcher, "watcher")
        self._spawn(self._updater, "updater")
        if self.config.walltime:
            self._timer = threading.Timer(self.config.walltime, self.close, ("walltime",))
            self._timer.daemon = True
            self._timer.start()
        self._emit(EntityKind.PILOT, self.pid, "ACTIVE", {"slots": self.table.summary(),
                                                          "agent_pid": os.getpid()})
        log.info("%s active with %s", self.name, self.table.summary())
        return self

    def _spawn(self, fn, name):
        def guarded():
            try:
                fn()
            except Exception:
                log.exception("%s: component %s crashed", self.name, name)
                self._abort(f"component {name} crashed")
        t = threading.Thread(target=guarded, name=f"{self.name}.{name}", daemon=True)
        self._threads.append(t)
        t.start()

    def run(self, timeout: float | None = None) -> int:
        self.start()
        self.wait(timeout)
        return 0

    def wait(self, timeout: float | None = None) -> bool:
        if not self._done.wait(timeout):
            return False
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(5.0)
        self.inbox.close()
        self.outbox.close()
        return True

    def close(self, reason: str = "shutdown"):
        """Stop accepting work, cancel what has not finished, then exit."""
        with self._lock:
            if self._closing is not None:
                return
            self._closing = reason
            running = list(self._running.values())
        log.info("%s closing: %s", self.name, reason)
        if self._timer is not None:
            self._timer.cancel()
        for au in running:
            au.cancel_reason = reason
            if au.process is not None:
                kill_process_group(au.process)
        try:
            self._q_sched.put(("close", None))
        except QueueClosed:
            pass
        self._maybe_exit()

    def _abort(self, reason: str):
        # a crashed component may hold units no other thread will move on
        self.close(reason)
        with self._lock:
            stuck = list(self._active.values())
        for au in stuck:
            if au.process is not None:
                kill_process_group(au.process)
            self._finish(au, UnitState.FAILED, {"error": reason})

    @property
    def closing(self) -> str | None:
        return self._closing

    def _maybe_exit(self):
        with self._lock:
            if self._closing is None or self._active or self._halt.is_set():
                return
            self._halt.set()
        self._emit(EntityKind.COMPONENT, f"{self.name}.scheduler", "AUDIT",
                   {"checks": self.checks, "violations": self.violations}, "scheduler")
        for q in (self._q_stage_in, self._q_sched, self._q_exec, self._q_stage_out, self._q_events):
            q.close()
        threading.Thread(target=self._finalize, daemon=True).start()

    def _finalize(self):
        for t in self._threads:
            if t.name.endswith(".updater"):
                t.join()
        self._done.set()

    # -- components ------------------------------------------------------------

    def _receiver(self):
        while not self._halt.is_set():
            msgs = self.inbox.get_bulk(self.name, timeout=self.config.poll * 10, target=self.pid)
            for msg in msgs:
                kind = msg.get("type")
                if kind == "unit":
                    self._receive_unit(msg)
                elif kind == "shutdown":
                    self.close(msg.get("reason", "shutdown"))
                elif kind == "cancel":
                    self.cancel_units(msg.get("units", []))
                else:
                    log.warning("%s: unknown bridge message %r", self.name, kind)

    def _receive_unit(self, msg):
        uid = msg["unit"]["id"]
        desc = UnitDescription.from_dict(msg["unit"]["description"])
        au = AgentUnit(uid, desc, sandbox_dir(self.config.session_dir, self.pid, uid),
                       [StagingDirective.parse(d) for d in msg.get("inputs", [])],
                       [StagingDirective.parse(d) for d in msg.get("outputs", [])])
        with self._lock:
            if uid in self._active:
                log.warning("%s: duplicate delivery of %s ignored", self.name, uid)
                return
            closing = self._closing
            if closing is None:
                self._active[uid] = au
        if closing is not None:
            self._unit_event(au, UnitState.CANCELED, {"reason": closing})
            return
        self._unit_event(au, UnitState.AGENT_STAGING_INPUT, component="stager_in")
        self._q_stage_in.put(au)

    def cancel_units(self, ids):
        with self._lock:
            targets = [self._active[i] for i in ids if i in self._active]
        for au in targets:
            au.cancel_reason = "canceled"
            if au.process is not None:
                kill_process_group(au.process)

    def _loop(self, queue: Queue, handle, bulk=None):
        while True:
            try:
                items = queue.get_bulk(bulk, timeout=0.1)
            except QueueClosed:
                return
            for item in items:
                handle(item)

    def _stage_in_worker(self):
        self._loop(self._q_stage_in, self._stage_in, 1)

    def _stage_in(self, au: AgentUnit):
        if self._closing or au.cancel_reason:
            return self._finish(au, UnitState.CANCELED, {"reason": self._closing or au.cancel_reason})
        try:
            link_inputs(au.inputs, au.sandbox)
        except (PilotkitError, OSError) as exc:
            return self._finish(au, UnitState.FAILED, {"error": f"{type(exc).__name__}: {exc}"},
                                "stager_in")
        self._unit_event(au, UnitState.AGENT_SCHEDULING, component="scheduler")
        self._q_sched.put(("unit", au))

    def _audit(self, event, unit_id):
        if not self.config.audit and self.observer is None:
            return
        self.checks += 1
        ok = self.table.conserved()
        if not ok:
            self.violations += 1
            log.error("%s: slot conservation violated after %s of %s", self.name, event, unit_id)
        if self.observer is not None:
            self.observer(event, unit_id, self.table)
        if self.config.audit:
            self._emit(EntityKind.COMPONENT, f"{self.name}.scheduler", "SLOTS",
                       {"event": event, "unit": unit_id, "busy_cores": self.table.busy_cores,
                        "held_cores": sum(p.cores for p in self.table.held.values()),
                        "total_cores": self.table.total_cores, "conserved": ok}, "scheduler")

    def _scheduler(self):
        waiting: list[AgentUnit] = []
        while True:
            try:
                items = self._q_sched.get_bulk(None, timeout=0.1)
            except QueueClosed:
                return
            retry = False
            for kind, au in items:
                if kind == "release":
                    release_slots(au.placement, self.table)
                    self._audit("release", au.id)
                    retry = True
                elif kind == "unit":
                    if self._closing or au.cancel_reason:
                        self._finish(au, UnitState.CANCELED,
                                     {"reason": self._closing or au.cancel_reason})
                    elif waiting or not self._place(au):
                        # FIFO: a new unit queues behind the ones already waiting
                        waiting.append(au)
                elif kind == "close":
                    pass
            if self._closing and waiting:
                for au in waiting:
                    self._finish(au, UnitState.CANCELED, {"reason": self._closing})
                waiting = []
            if waiting and (retry or any(k == "unit" for k, _ in items)):
                waiting = self._retry(waiting)

    def _place(self, au: AgentUnit) -> bool:
        d = au.description
        try:
            placement = allocate_slots(SlotRequest(d.cores, d.gpus, d.mpi, au.id), self.table)
        except ImpossibleRequest as exc:
            self._finish(au, UnitState.FAILED, {"error": f"ImpossibleRequest: {exc}"}, "scheduler")
            return True
        if placement is None:
            return False
        au.placement = placement
        self._audit("allocate", au.id)
        self._q_exec.put(au)
        return True

    def _retry(self, waiting: list) -> list:
        still = []
        blocked = set()
        for i, au in enumerate(waiting):
            if self.table.free_cores == 0:
                still.extend(waiting[i:])
                break
            d = au.description
            shape = (d.cores, d.gpus, d.mpi)
            # a shape that just failed cannot fit until something is released
            if shape in blocked or not self._place(au):
                blocked.add(shape)
                still.append(au)
        return still

    def _release(self, au: AgentUnit):
        if au.placement is not None:
            try:
                self._q_sched.put(("release", au))
            except QueueClosed:
                pass

    def _executor(self):
        self._loop(self._q_exec, self._execute, 1)

    def _execute(self, au: AgentUnit):
        if self._closing or au.cancel_reason:
            self._finish(au, UnitState.CANCELED, {"reason": self._closing or au.cancel_reason})
            return self._release(au)
        try:
            au.sandbox.mkdir(parents=True, exist_ok=True)
            cmd = build_launch_command(au, au.placement, self.config.resource, au.sandbox)
            with self._lock:
                au.process = spawn(cmd)
                self._running[au.id] = au
                closing = self._closing
        except (PilotkitError, OSError) as exc:
            self._finish(au, UnitState.FAILED, {"error": f"{type(exc).__name__}: {exc}"}, "executor")
            return self._release(au)
        if closing:
            # close() ran before this unit was visible to it
            au.cancel_reason = closing
            kill_process_group(au.process)
        self._unit_event(au, UnitState.EXECUTING,
                         {"placement": au.placement.to_dict(), "command": cmd.command,
                          "os_pid": au.process.pid}, "executor")

    def _watcher(self):
        while not self._halt.is_set():
            with self._lock:
                running = list(self._running.values())
            finished = []
            for au in running:
                code = au.process.poll()
                if code is not None:
                    finished.append((au, code))
            if not finished:
                time.sleep(0.002)
                continue
            with self._lock:
                for au, _ in finished:
                    self._running.pop(au.id, None)
            for au, code in finished:
                # the unit leaves EXECUTING before its slots are released
                if au.cancel_reason:
                    self._finish(au, UnitState.CANCELED, {"reason": au.cancel_reason, "exit_code": code},
                                 "executor")
                elif code == 0:
                    self._unit_event(au, UnitState.AGENT_STAGING_OUTPUT, {"exit_code": 0}, "stager_out")
                    self._q_stage_out.put(au)
                else:
                    self._finish(au, UnitState.FAILED, {"exit_code": code,
                                                        "error": f"exit code {code}"}, "executor")
                self._release(au)

    def _stage_out_worker(self):
        self._loop(self._q_stage_out, self._stage_out, 1)

    def _stage_out(self, au: AgentUnit):
        try:
            collect_outputs(au.outputs, au.sandbox)
        except (PilotkitError, OSError) as exc:
            return self._finish(au, UnitState.FAILED,
                                {"exit_code": 0, "error": f"{type(exc).__name__}: {exc}"}, "stager_out")
        self._finish(au, UnitState.DONE, {"exit_code": 0}, "stager_out")

    def _updater(self):
        while True:
            try:
                msgs = self._q_events.get_bulk(1024, timeout=0.05)
            except QueueClosed:
                return
            if msgs:
                self.outbox.put_bulk(msgs)


class InProcessAgent:
    """Process-like wrapper running an Agent on threads of this process."""

    def __init__(self, config: AgentConfig):
        self.agent = Agent(config)
        self.returncode = None
        self.pid = os.getpid()
        self._thread = threading.Thread(target=self._run, name=f"agent.{config.pilot_id}", daemon=True)
        self._thread.start()

    def _run(self):
        try:
            self.returncode = self.agent.run()
        except Exception:
            log.exception("in-process agent %s failed", self.agent.pid)
            self.returncode = 1

    def poll(self):
        return None if self._thread.is_alive() else self.returncode

    def terminate(self):
        self.agent.close("terminated")

    kill = terminate

    def wait(self, timeout=None):
        import subprocess
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise subprocess.TimeoutExpired(f"agent {self.agent.pid}", timeout)
        return self.returncode
