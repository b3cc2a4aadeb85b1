"""Client side of the runtime: sessions, pilot and unit managers.

A Session owns the session directory (event log plus bridge), one backend
per resource and an updater thread that pulls agent events from the
bridge outbox, persists them and hands them to the managers.

PilotManager launches pilots through its Launcher component and follows
their backend jobs. UnitManager binds units to pilots late: its Scheduler
only assigns a unit to a pilot that is already ACTIVE; its StagerInput
copies input files into the pilot's staging area and forwards the unit to
the agent over the bridge inbox.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import os
import secrets
import shutil
import subprocess
import sys
import threading
import time
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .agent.agent import AgentConfig, InProcessAgent, pilot_dir, staging_dir
from .backends import TERMINAL_JOB_STATES, JobState, make_backend
from .exceptions import (DuplicateAttachment, MissingSource, ResourceError, Timeout, UnschedulableUnit,
                         ValidationError)
from .mesh import Component, Queue, QueueClosed
from .model import (EntityKind, Event, Pilot, PilotDescription, StagingDirective, StagingMode, Unit,
                    UnitDescription, validate_unit_description)
from .resources import AgentLaunch, ResourceConfig, load_resource_config
from .states import PILOT, UNIT, PilotState, UnitState
from .store import SessionStore

log = logging.getLogger(__name__)


class SchedulerPolicy(str, Enum):
    ROUND_ROBIN = "ROUND_ROBIN"
    BACKFILL = "BACKFILL"


def new_session_id() -> str:
    return time.strftime("session.%Y%m%d.%H%M%S.") + secrets.token_hex(3)


class Session:
    """One run of the runtime, rooted at a session directory."""

    def __init__(self, path=None, *, config_dir=None, resources: Iterable[ResourceConfig] = (),
                 agent_launch: AgentLaunch | str | None = None, clock: Callable[[], float] = time.monotonic):
        self.path = Path(path) if path is not None else Path.cwd() / new_session_id()
        self.path.mkdir(parents=True, exist_ok=True)
        self.id = self.path.name
        self.config_dir = config_dir
        self.agent_launch = AgentLaunch(agent_launch) if agent_launch else None
        self.clock = clock
        self.store = SessionStore(self.path)
        self._resources = {rc.name: rc for rc in resources}
        self._backends = {}
        self._counters = {"pilot": itertools.count(), "unit": itertools.count()}
        self._lock = threading.Lock()
        self._drain_lock = threading.Lock()
        self._pilot_owner: dict[str, "PilotManager"] = {}
        self._unit_owner: dict[str, "UnitManager"] = {}
        self._pmgrs: list[PilotManager] = []
        self._umgrs: list[UnitManager] = []
        self._closed = False
        self._stop = threading.Event()
        self._updater = threading.Thread(target=self._update_loop, name=f"{self.id}.updater", daemon=True)
        self._updater.start()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"<Session {self.id}>"

    # -- resources ---------------------------------------------------------

    def resource(self, name: str) -> ResourceConfig:
        with self._lock:
            if name not in self._resources:
                self._resources[name] = load_resource_config(name, self.config_dir)
            return self._resources[name]

    def backend(self, name: str):
        rc = self.resource(name)
        with self._lock:
            if name not in self._backends:
                self._backends[name] = make_backend(rc, self.clock)
            return self._backends[name]

    def next_id(self, kind: str) -> str:
        with self._lock:
            n = next(self._counters[kind])
        return f"{kind}.{n:04d}" if kind == "pilot" else f"{kind}.{n:06d}"

    # -- events ------------------------------------------------------------

    def emit(self, kind, entity_id, name, component, payload=None) -> Event:
        ev = Event(kind, entity_id, getattr(name, "value", name), component, payload)
        self.store.persist(ev)
        return ev

    def emit_bulk(self, events: list[Event]):
        if events:
            self.store.persist_bulk(events)

    def _update_loop(self):
        while not self._stop.is_set():
            try:
                self.drain_outbox(timeout=0.02)
            except Exception:
                log.exception("session updater failed")
                time.sleep(0.1)

    def drain_outbox(self, timeout: float = 0.0) -> int:
        """Persist and dispatch whatever agents have sent so far."""
        with self._drain_lock:
            n = 0
            while True:
                msgs = self.store.outbox.get_bulk("client", timeout=timeout if not n else 0.0)
                if not msgs:
                    return n
                n += len(msgs)
                events = [m["event"] for m in msgs if m.get("type") == "event"]
                # managers persist the transitions they accept, before their
                # callbacks run, so the log holds only legal histories in
                # causal order
                other = [ev for ev in events if not self._dispatch(ev)]
                if other:
                    self.store.persist_bulk(other)

    def _dispatch(self, ev: dict) -> bool:
        """Route an entity event to its manager; False for non-entity events."""
        kind, eid = ev["entity_kind"], ev["entity_id"]
        if kind == EntityKind.PILOT.value:
            owner = self._pilot_owner.get(eid)
        elif kind == EntityKind.UNIT.value:
            owner = self._unit_owner.get(eid)
        else:
            return False
        if owner is not None:
            owner._on_agent_event(ev)
        return True

    def send(self, messages: list[dict]):
        if messages:
            self.store.inbox.put_bulk(messages)

    # -- shutdown ------------------------------------------------------------

    def close(self, cancel_timeout: float = 10.0):
        if self._closed:
            return
        self._closed = True
        for pm in self._pmgrs:
            try:
                pm.close(cancel_timeout)
            except Exception:
                log.exception("closing %s failed", pm)
        for um in self._umgrs:
            um.close()
        self._stop.set()
        self._updater.join()
        self.drain_outbox()
        for backend in self._backends.values():
            backend.shutdown()
        self.store.close()


def _descriptions(descs, kind):
    if descs is None:
        return []
    if isinstance(descs, (kind, dict)):
        return [descs]
    return list(descs)


class Launcher(Component):
    """Submits pilot jobs to their resource backends."""

    requeue_on_kill = True

    def __init__(self, pmgr: "PilotManager"):
        super().__init__(f"{pmgr.name}.launcher")
        self.pmgr = pmgr

    def _workers(self):
        return [lambda: self.consume(self.pmgr._launch_queue, self.pmgr._launch)]


class PilotManager:
    def __init__(self, session: Session, *, executors: int | None = None, audit: bool = False,
                 poll: float = 0.02, cancel_grace: float = 2.0):
        self.session = session
        self.name = f"pmgr.{len(session._pmgrs)}"
        self.executors = executors
        self.audit = audit
        self.poll = poll
        self.cancel_grace = cancel_grace
        self.pilots: dict[str, Pilot] = {}
        self._cancel_requested: set[str] = set()
        self._callbacks: list[Callable] = []
        self._cond = threading.Condition(threading.RLock())
        self._launch_queue = Queue(f"{self.name}.launch")
        self.launcher = Launcher(self).start()
        self._stop = threading.Event()
        self._monitor = threading.Thread(target=self._monitor_loop, name=f"{self.name}.monitor", daemon=True)
        self._monitor.start()
        session._pmgrs.append(self)

    def __repr__(self):
        return f"<PilotManager {self.name} pilots={len(self.pilots)}>"

    def register_callback(self, cb: Callable):
        """``cb(pilot, state)`` is called after every pilot state change."""
        self._callbacks.append(cb)

    def submit_pilots(self, descs) -> list[Pilot]:
        descs = [d if isinstance(d, PilotDescription) else PilotDescription.from_dict(d)
                 for d in _descriptions(descs, PilotDescription)]
        for d in descs:
            d.validate()
            self.session.resource(d.resource)
        pilots = []
        for d in descs:
            pilot = Pilot(self.session.next_id("pilot"), d)
            with self._cond:
                self.pilots[pilot.id] = pilot
                self.session._pilot_owner[pilot.id] = self
            self.session.emit(EntityKind.PILOT, pilot.id, PilotState.NEW, "pmgr", {"description": d.to_dict()})
            self._advance(pilot, PilotState.LAUNCHING)
            pilots.append(pilot)
        if pilots:
            self._launch_queue.put_bulk(pilots)
        return pilots

    def get_pilots(self, ids=None) -> list[Pilot]:
        ids = list(self.pilots) if ids is None else ids
        return [self.pilots[i] for i in ids]

    # -- state ---------------------------------------------------------------

    def _advance(self, pilot: Pilot, state: PilotState, payload=None, component="pmgr",
                 emit: bool | dict = True) -> bool:
        # emit may be the agent's own event record, persisted as is
        with self._cond:
            if not PILOT.is_legal(pilot.state, state):
                log.debug("ignoring %s -> %s for %s", pilot.state.value, state.value, pilot.id)
                return False
            if isinstance(emit, dict):
                self.session.store.persist(emit)
            elif emit:
                self.session.emit(EntityKind.PILOT, pilot.id, state, component, payload)
            pilot.state = PilotState(state)
            if payload and "error" in payload:
                pilot.error = payload["error"]
            if payload and "slots" in payload:
                pilot.slot_table_snapshot = payload["slots"]
            self._cond.notify_all()
        for cb in list(self._callbacks):
            try:
                cb(pilot, pilot.state)
            except Exception:
                log.exception("pilot callback failed")
        return True

    def _on_agent_event(self, ev: dict):
        pilot = self.pilots[ev["entity_id"]]
        if ev["event_name"] == PilotState.ACTIVE.value:
            return self._advance(pilot, PilotState.ACTIVE, ev.get("payload"), emit=ev)
        return False

    # -- launching -------------------------------------------------------------

    def _agent_config(self, pilot: Pilot, rc: ResourceConfig) -> AgentConfig:
        d = pilot.description
        kwargs = {}
        if self.executors is not None:
            kwargs["executors"] = self.executors
        return AgentConfig(pilot.id, str(self.session.path), rc, d.cores, d.gpus,
                           walltime=d.runtime * 60.0, audit=self.audit, **kwargs)

    def _launch(self, pilot: Pilot):
        if pilot.state is not PilotState.LAUNCHING:
            return
        rc = self.session.resource(pilot.description.resource)
        backend = self.session.backend(rc.name)
        config = self._agent_config(pilot, rc)
        path = config.write(pilot_dir(self.session.path, pilot.id) / "agent.json")
        mode = self.session.agent_launch or rc.agent_launch
        payload = (lambda: InProcessAgent(config)) if mode is AgentLaunch.IN_PROCESS \
            else (lambda: _agent_process(path))
        try:
            handle = backend.submit_pilot_job(pilot.description, rc, payload)
        except (ResourceError, ValidationError) as exc:
            log.warning("pilot %s not launched: %s", pilot.id, exc)
            self._advance(pilot, PilotState.FAILED, {"error": f"{type(exc).__name__}: {exc}"}, "launcher")
            return
        self._advance(pilot, PilotState.QUEUED, {"job": handle.job_id, "backend": handle.backend}, "launcher")
        with self._cond:
            pilot.job_handle = handle

    def _monitor_loop(self):
        while not self._stop.wait(self.poll):
            for pilot in list(self.pilots.values()):
                if pilot.job_handle is None or PILOT.is_terminal(pilot.state):
                    continue
                try:
                    self._check(pilot)
                except Exception:
                    log.exception("monitoring %s failed", pilot.id)

    def _check(self, pilot: Pilot):
        backend = self.session.backend(pilot.description.resource)
        state = backend.job_state(pilot.job_handle)
        if state not in TERMINAL_JOB_STATES:
            return
        # account for everything the agent said before it went away
        self.session.drain_outbox()
        info = backend.job_info(pilot.job_handle)
        if pilot.id in self._cancel_requested:
            self._advance(pilot, PilotState.CANCELED, {"job_state": state.value})
        elif pilot.state is PilotState.ACTIVE and state is JobState.DONE:
            self._advance(pilot, PilotState.DONE, {"job_state": state.value})
        else:
            error = info.get("error") or f"job ended {state.value} (exit code {info.get('exit_code')})"
            self._advance(pilot, PilotState.FAILED, {"job_state": state.value, "error": error})

    # -- waiting and canceling -------------------------------------------------

    def wait_pilots(self, ids=None, state=None, timeout: float | None = None) -> dict[str, PilotState]:
        """Block until the pilots reach ``state`` (or any terminal state)."""
        ids = list(self.pilots) if ids is None else [getattr(i, "id", i) for i in ids]
        wanted = None if state is None else {PilotState(s) for s in
                                             ([state] if isinstance(state, (str, PilotState)) else state)}

        def reached(p):
            return p.state in wanted or PILOT.is_terminal(p.state) if wanted else PILOT.is_terminal(p.state)

        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not all(reached(self.pilots[i]) for i in ids):
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    raise Timeout(f"pilots not ready after {timeout}s")
                self._cond.wait(0.1 if left is None else min(0.1, left))
            return {i: self.pilots[i].state for i in ids}

    def cancel_pilots(self, ids=None, timeout: float | None = 10.0) -> dict[str, PilotState]:
        ids = list(self.pilots) if ids is None else [getattr(i, "id", i) for i in ids]
        live = [self.pilots[i] for i in ids if not PILOT.is_terminal(self.pilots[i].state)]
        with self._cond:
            self._cancel_requested.update(p.id for p in live)
        self.session.send([{"type": "shutdown", "target": p.id, "reason": "canceled"}
                           for p in live if p.state is PilotState.ACTIVE])
        for p in live:
            if p.state is PilotState.ACTIVE:
                continue
            if p.job_handle is not None:
                self.session.backend(p.description.resource).cancel_job(p.job_handle, self.cancel_grace)
            elif p.state in (PilotState.NEW, PilotState.LAUNCHING):
                self._advance(p, PilotState.CANCELED, {"reason": "canceled before launch"})
        try:
            return self.wait_pilots([p.id for p in live], timeout=self.cancel_grace)
        except Timeout:
            for p in live:
                if p.job_handle is not None and not PILOT.is_terminal(p.state):
                    self.session.backend(p.description.resource).cancel_job(p.job_handle, self.cancel_grace)
            return self.wait_pilots(ids, timeout=timeout)

    def close(self, timeout: float = 10.0):
        if any(not PILOT.is_terminal(p.state) for p in self.pilots.values()):
            self.cancel_pilots(timeout=timeout)
        self._stop.set()
        self._monitor.join()
        self.launcher.stop()
        self._launch_queue.close()


def _agent_process(config_path) -> subprocess.Popen:
    """Start an agent as a separate Python process."""
    config_path = Path(config_path)
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    out = open(config_path.with_name("agent.log"), "ab")
    try:
        return subprocess.Popen([sys.executable, "-m", "pilotkit.agent", str(config_path)],
                                stdin=subprocess.DEVNULL, stdout=out, stderr=subprocess.STDOUT,
                                env=env, start_new_session=True)
    finally:
        out.close()


class UnitScheduler(Component):
    requeue_on_kill = True

    def __init__(self, umgr: "UnitManager"):
        super().__init__(f"{umgr.name}.scheduler")
        self.umgr = umgr

    def _workers(self):
        return [lambda: self.consume(self.umgr._schedule_queue, self.umgr._schedule)]


class StagerInput(Component):
    requeue_on_kill = True

    def __init__(self, umgr: "UnitManager", index: int = 0):
        super().__init__(f"{umgr.name}.stager_input.{index}")
        self.umgr = umgr

    def _workers(self):
        return [lambda: self.consume(self.umgr._stage_queue, self.umgr._stage)]


class UnitManager:
    def __init__(self, session: Session, policy: SchedulerPolicy | str = SchedulerPolicy.ROUND_ROBIN,
                 stagers: int = 1):
        self.session = session
        self.name = f"umgr.{len(session._umgrs)}"
        self.policy = SchedulerPolicy(policy)
        self.units: dict[str, Unit] = {}
        self.pilots: list[Pilot] = []
        self._pmgrs: set = set()
        self._callbacks: list[Callable] = []
        self._cond = threading.Condition(threading.RLock())
        self._rr = 0
        # cores of assigned, unfinished units per pilot (BACKFILL)
        self._load: dict[str, int] = {}
        self._counted: set[str] = set()
        self._waiting: list[Unit] = []
        self._schedule_queue = Queue(f"{self.name}.schedule")
        self._stage_queue = Queue(f"{self.name}.stage")
        self.scheduler = UnitScheduler(self).start()
        self.stagers = [StagerInput(self, i).start() for i in range(max(1, stagers))]
        session._umgrs.append(self)

    def __repr__(self):
        return f"<UnitManager {self.name} units={len(self.units)} policy={self.policy.value}>"

    def register_callback(self, cb: Callable):
        """``cb(unit, state)`` is called after every unit state change."""
        self._callbacks.append(cb)

    def unregister_callback(self, cb: Callable):
        try:
            self._callbacks.remove(cb)
        except ValueError:
            pass

    # -- pilots ------------------------------------------------------------------

    def add_pilots(self, pilots):
        pilots = [pilots] if isinstance(pilots, Pilot) else list(pilots)
        with self._cond:
            for p in pilots:
                if any(q.id == p.id for q in self.pilots):
                    raise DuplicateAttachment(p.id)
                owner = self.session._pilot_owner.get(p.id)
                if owner is None or owner.pilots.get(p.id) is not p:
                    raise ValueError(f"pilot {p.id} does not belong to session {self.session.id}")
            for p in pilots:
                self.pilots.append(p)
                self._load.setdefault(p.id, 0)
                owner = self.session._pilot_owner[p.id]
                if owner not in self._pmgrs:
                    self._pmgrs.add(owner)
                    owner.register_callback(self._on_pilot_state)
        self._requeue_waiting()
        return True

    def _on_pilot_state(self, pilot: Pilot, state: PilotState):
        if not any(p is pilot for p in self.pilots):
            return
        if state is PilotState.ACTIVE:
            self._requeue_waiting()
        elif PILOT.is_terminal(state):
            self._pilot_gone(pilot, state)

    def _pilot_gone(self, pilot: Pilot, state: PilotState):
        target = UnitState.CANCELED if state is PilotState.CANCELED else UnitState.FAILED
        reason = f"pilot {pilot.id} {state.value}"
        with self._cond:
            bound = [u for u in self.units.values()
                     if u.pilot_id == pilot.id and not UNIT.is_terminal(u.state)]
            orphans = []
            if not any(not PILOT.is_terminal(p.state) for p in self.pilots):
                orphans, self._waiting = self._waiting, []
        self._set_states([(u, target, {"error": reason}) for u in bound])
        self._set_states([(u, UnitState.FAILED, {"error": "no live pilot left"}) for u in orphans])

    def _requeue_waiting(self):
        with self._cond:
            waiting, self._waiting = self._waiting, []
        if waiting:
            try:
                self._schedule_queue.put_bulk(waiting)
            except QueueClosed:
                pass

    # -- state ---------------------------------------------------------------

    def _set_states(self, changes, component="umgr", emit: bool | dict = True) -> list[Unit]:
        """Apply (unit, state, payload) changes; illegal ones are skipped.

        ``emit`` may be an agent event record, persisted as is when accepted.
        """
        applied, events = [], []
        with self._cond:
            for unit, state, payload in changes:
                if not UNIT.is_legal(unit.state, state):
                    if not UNIT.is_terminal(unit.state):
                        log.warning("%s: illegal %s -> %s ignored", unit.id, unit.state.value, state)
                    continue
                if isinstance(emit, dict):
                    events.append(emit)
                elif emit:
                    events.append(Event(EntityKind.UNIT, unit.id, state.value, component, payload))
                unit.state = UnitState(state)
                if payload:
                    if "error" in payload:
                        unit.error = payload["error"]
                    if "exit_code" in payload:
                        unit.exit_code = payload["exit_code"]
                    if "placement" in payload:
                        unit.placement = payload["placement"]
                applied.append(unit)
            self.session.emit_bulk(events)
            self._cond.notify_all()
        for unit in applied:
            if UNIT.is_terminal(unit.state):
                self._release_load(unit)
            for cb in list(self._callbacks):
                try:
                    cb(unit, unit.state)
                except Exception:
                    log.exception("unit callback failed")
        return applied

    def _release_load(self, unit: Unit):
        with self._cond:
            if unit.id in self._counted:
                self._counted.discard(unit.id)
                self._load[unit.pilot_id] -= unit.description.cores

    def _on_agent_event(self, ev: dict) -> bool:
        unit = self.units[ev["entity_id"]]
        try:
            state = UnitState(ev["event_name"])
        except ValueError:
            return False
        return bool(self._set_states([(unit, state, ev.get("payload") or {})], emit=ev))

    # -- submission ----------------------------------------------------------

    def submit_units(self, cuds) -> list[Unit]:
        cuds = _descriptions(cuds, UnitDescription)
        units, valid, events = [], [], []
        for cud in cuds:
            uid = self.session.next_id("unit")
            try:
                desc = validate_unit_description(cud)
            except (ValidationError, TypeError) as exc:
                field = getattr(exc, "field", None)
                raw = cud if isinstance(cud, UnitDescription) else UnitDescription()
                unit = Unit(uid, raw, UnitState.FAILED, error=str(exc))
                events.append(Event(EntityKind.UNIT, uid, UnitState.NEW.value, "umgr", {"invalid": True}))
                events.append(Event(EntityKind.UNIT, uid, UnitState.FAILED.value, "umgr",
                                    {"error": str(exc), "field": field}))
            else:
                unit = Unit(uid, desc)
                valid.append(unit)
                events.append(Event(EntityKind.UNIT, uid, UnitState.NEW.value, "umgr",
                                    {"cores": desc.cores, "gpus": desc.gpus, "mpi": desc.mpi,
                                     "name": desc.name}))
            with self._cond:
                self.units[uid] = unit
                self.session._unit_owner[uid] = self
            units.append(unit)
        self.session.emit_bulk(events)
        self._set_states([(u, UnitState.UMGR_SCHEDULING, None) for u in valid])
        if valid:
            self._schedule_queue.put_bulk(valid)
        return units

    def get_units(self, ids=None) -> list[Unit]:
        ids = list(self.units) if ids is None else ids
        return [self.units[i] for i in ids]

    # -- scheduling ------------------------------------------------------------

    def _schedule(self, unit: Unit):
        if unit.state is not UnitState.UMGR_SCHEDULING:
            return
        d = unit.description
        error = None
        with self._cond:
            if not self.pilots:
                self._waiting.append(unit)
                return
            live = [p for p in self.pilots if not PILOT.is_terminal(p.state)]
            fits = [p for p in live if p.cores >= d.cores and p.gpus >= d.gpus]
            if not live:
                error = "no live pilot left"
            elif not fits:
                error = "UnschedulableUnit: " + str(UnschedulableUnit(
                    f"{unit.id} needs {d.cores} cores/{d.gpus} gpus, "
                    f"largest attached pilot has {max(p.cores for p in live)} cores"))
            else:
                eligible = [p for p in fits if p.state is PilotState.ACTIVE]
                if not eligible:
                    # late binding: wait until a fitting pilot is ACTIVE
                    self._waiting.append(unit)
                    return
                target = self._pick(eligible, d)
                unit.pilot_id = target.id
                self._load[target.id] += d.cores
                self._counted.add(unit.id)
        if error is not None:
            self._set_states([(unit, UnitState.FAILED, {"error": error})], "umgr.scheduler")
            return
        self._set_states([(unit, UnitState.UMGR_STAGING_INPUT, {"pilot": target.id})], "umgr.scheduler")
        try:
            self._stage_queue.put(unit)
        except QueueClosed:
            pass

    def _pick(self, eligible: list[Pilot], d: UnitDescription) -> Pilot:
        if self.policy is SchedulerPolicy.BACKFILL:
            return max(eligible, key=lambda p: (p.cores - self._load[p.id], -self.pilots.index(p)))
        pilot = eligible[self._rr % len(eligible)]
        self._rr += 1
        return pilot

    # -- staging -------------------------------------------------------------------

    def _stage(self, unit: Unit):
        if unit.state is not UnitState.UMGR_STAGING_INPUT:
            return
        pid = unit.pilot_id
        area = staging_dir(self.session.path, pid)
        try:
            inputs = [self._stage_file(unit, d, area) for d in unit.description.input_staging]
        except MissingSource as exc:
            self._set_states([(unit, UnitState.FAILED, {"error": f"MissingSource: {exc}",
                                                        "path": exc.args[0]})], "umgr.stager_input")
            return
        except OSError as exc:
            self._set_states([(unit, UnitState.FAILED, {"error": f"staging failed: {exc}"})],
                             "umgr.stager_input")
            return
        outputs = []
        for d in unit.description.output_staging:
            d = StagingDirective.parse(d)
            dest = Path(d.destination)
            outputs.append({"source": d.source, "destination": str(dest if dest.is_absolute() else dest.resolve()),
                            "mode": d.mode.value})
        self.session.send([{"type": "unit", "target": pid,
                            "unit": {"id": unit.id, "description": unit.description.to_dict()},
                            "inputs": inputs, "outputs": outputs}])

    def _stage_file(self, unit: Unit, d, area: Path) -> dict:
        d = StagingDirective.parse(d)
        src = Path(d.source).expanduser().resolve()
        if not src.exists():
            raise MissingSource(str(d.source))
        area.mkdir(parents=True, exist_ok=True)
        if d.mode is StagingMode.MOVE:
            staged = area / f"{unit.id}.{src.name}"
            shutil.move(str(src), str(staged))
        else:
            # one staged copy per source file, shared by all units using it
            key = hashlib.sha1(str(src).encode()).hexdigest()[:12]
            staged = area / f"{key}.{src.name}"
            if not staged.exists():
                tmp = area / f".{key}.{os.getpid()}.{threading.get_ident()}.tmp"
                if src.is_dir():
                    shutil.copytree(src, tmp)
                else:
                    shutil.copy2(src, tmp)
                os.replace(tmp, staged)
        return {"source": str(staged), "destination": d.destination, "mode": d.mode.value}

    # -- waiting and canceling -----------------------------------------------------

    def wait_units(self, ids=None, timeout: float | None = None) -> dict[str, UnitState]:
        ids = list(self.units) if ids is None else [getattr(i, "id", i) for i in ids]
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not all(UNIT.is_terminal(self.units[i].state) for i in ids):
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    pending = sum(not UNIT.is_terminal(self.units[i].state) for i in ids)
                    raise Timeout(f"{pending} units still running after {timeout}s")
                self._cond.wait(0.1 if left is None else min(0.1, left))
            return {i: self.units[i].state for i in ids}

    def cancel_units(self, ids=None):
        ids = list(self.units) if ids is None else [getattr(i, "id", i) for i in ids]
        local, remote = [], {}
        with self._cond:
            for i in ids:
                u = self.units[i]
                if UNIT.is_terminal(u.state):
                    continue
                if UNIT.rank(u.state) <= UNIT.rank(UnitState.UMGR_SCHEDULING):
                    local.append(u)
                    if u in self._waiting:
                        self._waiting.remove(u)
                else:
                    remote.setdefault(u.pilot_id, []).append(u.id)
        self._set_states([(u, UnitState.CANCELED, {"reason": "canceled"}) for u in local])
        self.session.send([{"type": "cancel", "target": pid, "units": uids} for pid, uids in remote.items()])

    def kill_component(self, name: str):
        """Crash a client component (fault injection)."""
        comp = self._component(name)
        comp.kill()
        comp.join(1.0)

    def restart_component(self, name: str):
        comp = self._component(name)
        if comp.alive:
            comp.kill()
            comp.join(1.0)
        if name == "scheduler":
            self.scheduler = UnitScheduler(self).start()
        else:
            i = self.stagers.index(comp)
            self.stagers[i] = StagerInput(self, i).start()

    def _component(self, name: str):
        if name == "scheduler":
            return self.scheduler
        if name.startswith("stager"):
            return self.stagers[int(name.rpartition(".")[2]) if "." in name else 0]
        raise KeyError(name)

    def close(self):
        self.scheduler.stop()
        for s in self.stagers:
            s.stop()
        self._schedule_queue.close()
        self._stage_queue.close()
