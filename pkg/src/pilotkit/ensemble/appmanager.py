"""AppManager and its helper components.

The AppManager is the only component holding application state. Its loop
is the single writer: it takes messages from ``am_inbox``, journals the
resulting changes to the session event log, applies them, and publishes
newly ready tasks on ``wfp_sync``.

    AppManager --wfp_sync--> WFProcessor.enqueue --pending--> TaskManager --> UnitManager
    AppManager <--am_inbox-- WFProcessor.dequeue <--done----- TaskManager <-- unit callbacks

WFProcessor and TaskManager keep nothing that matters: when a heartbeat
monitor reports one of them lost, the AppManager starts a fresh instance
and re-dispatches every task whose completion it has not seen. Tasks that
already have a unit are adopted by the new TaskManager instead of being
submitted again. Duplicate completions are dropped as stale updates, so
each task is counted once.
"""

from __future__ import annotations

import concurrent.futures
import logging
import threading
import time
from pathlib import Path
from typing import Callable

from ..client import PilotManager, Session, UnitManager, new_session_id
from ..exceptions import (PilotkitError, RecoveryLoop, ResourceAcquisitionFailed, StaleUpdate,
                          ValidationError)
from ..mesh import Component, ComponentLost, HeartbeatMonitor, Queue, QueueClosed
from ..model import EntityKind, Event, PilotDescription
from ..states import PILOT, PIPELINE, UNIT, PilotState, TaskState, UnitState
from . import state as ops
from .entities import Pipeline, Stage, Task, translate_task, validate_workflow
from .state import COMPONENT, AppManagerState

log = logging.getLogger(__name__)

REPORT_SCHEMA = "pilotkit.ensemble.report/1"
WFPROCESSOR = "wfprocessor"
TASKMANAGER = "taskmanager"


class WFProcessor(Component):
    """Enqueue ready tasks for execution; dequeue completions back to the AppManager."""

    def __init__(self, name, queues, monitor=None):
        super().__init__(name, monitor)
        self.q = queues

    def _workers(self):
        return [self._enqueue, self._dequeue]

    def _enqueue(self):
        while not self.halted:
            try:
                tasks = self.q["wfp_sync"].get_bulk(timeout=self.poll)
            except QueueClosed:
                return
            if not tasks or self._killed.is_set():
                continue
            self.q["am_inbox"].put(("scheduled", [t["uid"] for t in tasks]))
            self.q["pending"].put_bulk(tasks)

    def _dequeue(self):
        while not self.halted:
            try:
                done = self.q["done"].get_bulk(timeout=self.poll)
            except QueueClosed:
                return
            if done and not self._killed.is_set():
                self.q["am_inbox"].put_bulk([("completed",) + tuple(d) for d in done])


class TaskManager(Component):
    """Turns tasks into units and reports unit outcomes."""

    def __init__(self, name, queues, umgr: UnitManager, monitor=None):
        super().__init__(name, monitor)
        self.q = queues
        self.umgr = umgr
        self._mine: set[str] = set()
        self._lock = threading.Lock()
        umgr.register_callback(self._on_unit)

    def _workers(self):
        return [self._submit]

    def _submit(self):
        while not self.halted:
            try:
                tasks = self.q["pending"].get_bulk(timeout=self.poll)
            except QueueClosed:
                return
            if not tasks or self._killed.is_set():
                continue
            uids = [t["uid"] for t in tasks]
            self.q["am_inbox"].put(("submitted", uids))
            with self._lock:
                self._mine.update(uids)
            self.umgr.submit_units([translate_task(t["spec"]) for t in tasks])

    def _on_unit(self, unit, state):
        if not UNIT.is_terminal(state) or self._killed.is_set():
            return
        uid = unit.description.name
        with self._lock:
            if uid not in self._mine:
                return
            self._mine.discard(uid)
        outcome = TaskState.DONE if state is UnitState.DONE else TaskState.FAILED
        info = {"unit": unit.id, "unit_state": state.value}
        if unit.exit_code is not None:
            info["exit_code"] = unit.exit_code
        if unit.error:
            info["error"] = unit.error
        try:
            self.q["done"].put((uid, outcome.value, info))
        except QueueClosed:
            pass

    def owns(self, uid: str) -> bool:
        with self._lock:
            return uid in self._mine

    def adopt(self, unit):
        """Follow a unit submitted by an earlier instance; report it if it already ended."""
        with self._lock:
            self._mine.add(unit.description.name)
        if UNIT.is_terminal(unit.state):
            self._on_unit(unit, unit.state)

    def kill(self):
        super().kill()
        self.umgr.unregister_callback(self._on_unit)


class ResManager:
    """Acquires and releases the pilot an ensemble run executes on."""

    def __init__(self, session: Session, resource_desc: dict, executors=None, audit=False):
        self.session = session
        self.resource_desc = dict(resource_desc)
        self.pmgr = PilotManager(session, executors=executors, audit=audit)
        self.umgr = UnitManager(session)
        self.pilot = None
        self.was_active = False
        self.pmgr.register_callback(self._on_pilot)

    def _on_pilot(self, pilot, state):
        if state is PilotState.ACTIVE:
            self.was_active = True

    def acquire(self):
        rd = self.resource_desc
        rc = self.session.resource(rd["resource"])
        pdesc = PilotDescription(rd["resource"], int(rd.get("cpus") or rc.total_cores),
                                 int(rd.get("walltime", 60)), int(rd.get("gpus", 0)),
                                 project=rd.get("project"), queue=rd.get("queue"))
        self.pilot, = self.pmgr.submit_pilots(pdesc)
        self.umgr.add_pilots(self.pilot)
        return self.pilot

    def failed(self) -> str | None:
        """Why the pilot can no longer run tasks, or None while it can."""
        p = self.pilot
        if p is None or not PILOT.is_terminal(p.state):
            return None
        return f"pilot {p.id} {p.state.value}" + (f": {p.error}" if p.error else "")

    def release(self):
        self.session.close()


class AppManager:
    def __init__(self, *, session_root=None, resource_desc: dict | None = None,
                 continue_on_failure: bool = False, heartbeat_interval: float = 1.0,
                 heartbeat_threshold: int = 3, max_restarts: int = 5, executors: int | None = None,
                 agent_launch=None, config_dir=None, resources=(), audit: bool = False):
        self.session_root = Path(session_root) if session_root else Path.cwd()
        self.continue_on_failure = continue_on_failure
        self.heartbeat_interval = heartbeat_interval
        self.heartbeat_threshold = heartbeat_threshold
        self.max_restarts = max_restarts
        self.executors = executors
        self.agent_launch = agent_launch
        self.config_dir = config_dir
        # ResourceConfig objects that take precedence over config files
        self.resources = tuple(resources)
        self.audit = audit
        self._workflow: list[Pipeline] | None = None
        self._resource_desc = None
        if resource_desc is not None:
            self.resource_desc = resource_desc
        self.state: AppManagerState | None = None
        self.session: Session | None = None
        self.components: dict[str, Component] = {}
        self.restarts = 0
        self.resubmissions = 0
        self._running = threading.Event()
        self._lock = threading.RLock()
        self._callbacks: list[Callable] = []

    # -- configuration --------------------------------------------------------

    @property
    def workflow(self):
        return self._workflow

    @workflow.setter
    def workflow(self, pipelines):
        self.set_workflow(pipelines)

    def set_workflow(self, pipelines):
        if self._running.is_set():
            raise ValidationError("workflow", "cannot replace the workflow of a running application")
        self._workflow = validate_workflow(pipelines)
        return True

    @property
    def resource_desc(self):
        return self._resource_desc

    @resource_desc.setter
    def resource_desc(self, desc: dict):
        missing = {"resource", "walltime", "cpus"} - set(desc)
        if missing:
            raise ValidationError(sorted(missing)[0], "required in resource_desc")
        self._resource_desc = dict(desc)

    def register_callback(self, cb: Callable):
        """``cb(record)`` is called for every journal record applied while running."""
        self._callbacks.append(cb)

    # -- journal -------------------------------------------------------------

    def _commit(self, recs: list[dict]):
        """Journal then apply; the only place application state changes."""
        if not recs:
            return
        with self._lock:
            if self.session is not None:
                self.session.emit_bulk([Event(EntityKind(r["entity_kind"]), r["entity_id"], r["event_name"],
                                              COMPONENT, r.get("payload")) for r in recs])
            for r in recs:
                self.state.apply(r)
        for cb in list(self._callbacks):
            for r in recs:
                cb(r)

    def _command(self, fn):
        """Run ``fn(state) -> records`` inside the AppManager loop (or directly when idle)."""
        with self._lock:
            if not self._running.is_set():
                if self.state is None:
                    raise PilotkitError("the application has not been run yet")
                self._commit(fn(self.state))
                return True
            fut = concurrent.futures.Future()
            self._queues["am_inbox"].put(("command", fn, fut))
        return fut.result()

    def suspend_pipeline(self, uid):
        return self._command(lambda st: ops.control(st, uid, "SUSPEND"))

    def resume_pipeline(self, uid):
        return self._command(lambda st: ops.control(st, uid, "RESUME"))

    def stop_pipeline(self, uid):
        return self._command(lambda st: ops.control(st, uid, "STOP"))

    def add_stages(self, pipeline_uid, stages):
        return self._command(lambda st: ops.add_stages(st, pipeline_uid, stages))

    def add_tasks(self, stage_uid, tasks):
        return self._command(lambda st: ops.add_tasks(st, stage_uid, tasks))

    def add_pipelines(self, pipelines):
        return self._command(lambda st: ops.add_pipelines(st, pipelines))

    # -- components ------------------------------------------------------------

    def _start_component(self, name):
        if name == WFPROCESSOR:
            comp = WFProcessor(f"{WFPROCESSOR}.{self.restarts}", self._queues, self._monitor)
        else:
            comp = TaskManager(f"{TASKMANAGER}.{self.restarts}", self._queues, self._res.umgr, self._monitor)
        self.components[name] = comp.start()
        return comp

    def kill_component(self, name: str):
        """Crash a component (fault injection); the heartbeat monitor notices."""
        with self._lock:
            comp = self.components[name]
        comp.kill()

    def recover_component(self, name: str):
        """Replace a lost component and re-dispatch everything it may have dropped."""
        q = self._queues
        old = self.components.get(name)
        if old is not None:
            old.kill()
            self._monitor.forget(old.name)
            old.join(1.0)
        # apply whatever the dead instance managed to report
        self._process(q["am_inbox"].drain())
        q["pending"].drain()
        q["wfp_sync"].drain()
        self._offered.clear()
        self.restarts += 1
        self._start_component(name)
        # a task that already has a unit is followed, never run twice
        tm = self.components[TASKMANAGER]
        units = {u.description.name: u for u in sorted(self._res.umgr.get_units(), key=lambda u: u.id)}
        redo, adopted = [], []
        for uid in self.state.in_flight():
            if uid in units:
                adopted.append(uid)
                tm.adopt(units[uid])
            elif not tm.owns(uid):
                redo.append(uid)
        if redo or adopted:
            self.resubmissions += len(redo)
            self.session.emit(EntityKind.COMPONENT, name, "RESUBMIT", COMPONENT,
                              {"tasks": redo, "adopted": adopted})
        if redo:
            q["pending"].put_bulk([self._task_message(u) for u in redo])
        log.info("recovered %s (restart %d, %d tasks re-dispatched, %d adopted)",
                 name, self.restarts, len(redo), len(adopted))

    def _task_message(self, uid) -> dict:
        return {"uid": uid, "spec": self.state.tasks[uid].spec}

    # -- the loop ----------------------------------------------------------------

    def _process(self, msgs):
        for msg in msgs:
            kind = msg[0]
            if kind == "scheduled":
                self._offered.difference_update(msg[1])
                self._commit(ops.mark_scheduled(self.state, msg[1]))
            elif kind == "submitted":
                self._commit(ops.mark_submitted(self.state, msg[1]))
            elif kind == "completed":
                uid, outcome, info = msg[1], msg[2], msg[3]
                try:
                    self._commit(ops.mark_task_done(self.state, uid, outcome, info))
                except StaleUpdate as exc:
                    log.debug("stale completion ignored: %s", exc)
            elif kind == "command":
                fn, fut = msg[1], msg[2]
                try:
                    self._commit(fn(self.state))
                except Exception as exc:
                    fut.set_exception(exc)
                else:
                    fut.set_result(True)

    def _publish(self):
        ready = [u for u in ops.ready_tasks(self.state) if u not in self._offered]
        if ready:
            self._offered.update(ready)
            self._queues["wfp_sync"].put_bulk([self._task_message(u) for u in ready])

    def _progress(self) -> int:
        return sum(1 for t in self.state.tasks.values() if t.state in (TaskState.DONE, TaskState.FAILED))

    def run(self, session=None, timeout: float | None = None) -> dict:
        """Execute a fresh copy of the workflow and return the report."""
        if self._workflow is None:
            raise ValidationError("workflow", "no workflow set")
        if self._resource_desc is None:
            raise ValidationError("resource_desc", "no resource description set")
        if self._running.is_set():
            raise PilotkitError("this application is already running")
        started = time.monotonic()
        path = Path(session) if session is not None else self.session_root / new_session_id()
        self.session = Session(path, config_dir=self.config_dir, resources=self.resources,
                               agent_launch=self.agent_launch)
        self.state = AppManagerState(self.continue_on_failure)
        self.restarts = self.resubmissions = 0
        self._offered: set[str] = set()
        self._queues = {n: Queue(n) for n in ("am_inbox", "wfp_sync", "pending", "done", "control")}
        self._monitor = HeartbeatMonitor(self._queues["control"], self.heartbeat_interval,
                                         self.heartbeat_threshold)
        self._res = ResManager(self.session, self._resource_desc, self.executors, self.audit)
        error = None
        try:
            # each run works on its own copy of the workflow
            spec = [Pipeline.from_dict(p.to_dict()) for p in self._workflow]
            self._commit(ops.describe(spec))
            try:
                self._res.acquire()
            except PilotkitError as exc:
                raise ResourceAcquisitionFailed(str(exc)) from exc
            self._commit(ops.start(self.state))
            with self._lock:
                self._start_component(WFPROCESSOR)
                self._start_component(TASKMANAGER)
                self._monitor.start()
                self._running.set()
            self._loop(timeout, started)
        except PilotkitError as exc:
            error = exc
            raise
        finally:
            with self._lock:
                self._running.clear()
            # commands that raced with the end of the run
            for msg in self._queues["am_inbox"].drain():
                if msg[0] == "command":
                    msg[2].set_exception(PilotkitError("the application finished"))
            self._shutdown()
            self.report = self._report(started, error)
        return self.report

    def _loop(self, timeout, started):
        q = self._queues
        last_progress, fruitless = self._progress(), 0
        self._publish()
        while not self.state.finished():
            if timeout is not None and time.monotonic() - started > timeout:
                raise PilotkitError(f"ensemble run did not finish within {timeout}s")
            for lost in q["control"].get_bulk(timeout=0):
                if not isinstance(lost, ComponentLost):
                    continue
                name = WFPROCESSOR if lost.component.startswith(WFPROCESSOR) else TASKMANAGER
                if self.components[name].name != lost.component:
                    continue
                progress = self._progress()
                fruitless = fruitless + 1 if progress == last_progress else 0
                last_progress = progress
                if fruitless > self.max_restarts:
                    raise RecoveryLoop(f"{fruitless} restarts of {name} without progress")
                self.recover_component(name)
            msgs = q["am_inbox"].get_bulk(timeout=0.02)
            self._process(msgs)
            self._publish()
            reason = self._res.failed()
            if reason and not self.state.finished():
                self._abandon(reason)

    def _abandon(self, reason: str):
        """The pilot is gone: give up on everything not yet finished."""
        # completions already on their way still count
        self._process(self._queues["am_inbox"].drain())
        if self.state.finished():
            return
        if not self._res.was_active:
            raise ResourceAcquisitionFailed(reason)
        for uid in self.state.in_flight():
            try:
                self._commit(ops.mark_task_done(self.state, uid, TaskState.FAILED,
                                                {"error": reason, "executed": False}))
            except StaleUpdate:
                pass
        for p in list(self.state.pipelines.values()):
            if not PIPELINE.is_terminal(p.state):
                self._commit([ops.record("PIPELINE", p.uid, "FAILED", {"error": reason})]
                             + ops._cancel_stages(self.state, p, p.cursor))

    def _shutdown(self):
        self._monitor.stop()
        for comp in self.components.values():
            comp.stop(1.0)
        for q in self._queues.values():
            q.close()
        try:
            self._res.release()
        except Exception:
            log.exception("releasing resources failed")

    def _report(self, started, error=None) -> dict:
        snap = self.state.snapshot()
        counts: dict[str, int] = {}
        for t in snap["tasks"].values():
            counts[t["state"]] = counts.get(t["state"], 0) + 1
        return {
            "schema": REPORT_SCHEMA,
            "session": self.session.id if self.session else None,
            "session_dir": str(self.session.path) if self.session else None,
            "tasks": {u: t["state"] for u, t in snap["tasks"].items()},
            "pipelines": {u: {"state": p["state"], "control": p["control"], "cursor": p["cursor"]}
                          for u, p in snap["pipelines"].items()},
            "counts": dict(sorted(counts.items())),
            "restarts": self.restarts,
            "resubmissions": self.resubmissions,
            "error": f"{type(error).__name__}: {error}" if error else None,
            "wall_time": round(time.monotonic() - started, 3),
        }


__all__ = ["AppManager", "Pipeline", "Stage", "Task", "WFProcessor", "TaskManager", "ResManager"]
