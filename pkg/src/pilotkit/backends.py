"""Uniform pilot-job submission over two backends.

``LocalBackend`` starts the pilot payload as soon as it is polled;
``SimulatedBatchBackend`` holds each job in a simulated batch queue for a
sampled wait and enforces a cap on concurrently running jobs. Both share
the same contract, exercised by one conformance suite.

A job's payload is a zero-argument callable returning a process-like
object (``poll``, ``terminate``, ``kill``, ``wait``). It is invoked when
the job leaves the queue. Job state advances lazily, on each call into the
backend, so a manual clock gives fully reproducible timelines.
"""

from __future__ import annotations

import itertools
import logging
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .exceptions import BackendUnavailable, OversubscribedRequest, UnknownJob
from .model import PilotDescription
from .resources import BatchSimConfig, ResourceConfig

log = logging.getLogger(__name__)


class JobState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


TERMINAL_JOB_STATES = frozenset({JobState.DONE, JobState.FAILED, JobState.CANCELED})


class ManualClock:
    """A clock that only moves when told to."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        with self._lock:
            self._now += seconds
            return self._now


@dataclass(frozen=True)
class JobHandle:
    backend: str
    job_id: str
    submitted_at: float


@dataclass
class _Job:
    handle: JobHandle
    description: PilotDescription
    config: ResourceConfig
    payload: Callable | None
    wait: float
    state: JobState = JobState.PENDING
    process: object = None
    started_at: float | None = None
    error: str | None = None
    exit_code: int | None = None


class _NullProcess:
    """Payload stand-in for jobs submitted without one: runs until canceled."""

    returncode = None

    def poll(self):
        return self.returncode

    def terminate(self):
        self.returncode = -15

    kill = terminate

    def wait(self, timeout=None):
        return self.returncode


class Backend:
    kind = "abstract"
    _instances = itertools.count()

    def __init__(self, clock: Callable[[], float] = time.monotonic, max_concurrent_jobs: int | None = None,
                 name: str | None = None):
        self.clock = clock
        self.max_concurrent_jobs = max_concurrent_jobs
        self.name = name or f"{self.kind}.{next(self._instances)}"
        self._jobs: dict[str, _Job] = {}
        self._order: list[str] = []
        self._ids = itertools.count()
        self._lock = threading.RLock()
        self._closed = False

    # -- contract ----------------------------------------------------------

    def submit_pilot_job(self, pdesc: PilotDescription, config: ResourceConfig,
                         payload: Callable | None = None) -> JobHandle:
        pdesc.validate()
        if pdesc.cores > config.total_cores:
            raise OversubscribedRequest(
                f"{pdesc.cores} cores requested, {config.name} has {config.total_cores}")
        if pdesc.gpus > config.total_gpus:
            raise OversubscribedRequest(
                f"{pdesc.gpus} gpus requested, {config.name} has {config.total_gpus}")
        with self._lock:
            if self._closed:
                raise BackendUnavailable(f"backend {self.name} is shut down")
            job_id = f"{self.name}.job.{next(self._ids):06d}"
            handle = JobHandle(self.name, job_id, self.clock())
            self._jobs[job_id] = _Job(handle, pdesc, config, payload, self._sample_wait())
            self._order.append(job_id)
            log.debug("submitted %s (wait %.3fs)", job_id, self._jobs[job_id].wait)
            return handle

    def job_state(self, handle: JobHandle) -> JobState:
        with self._lock:
            job = self._job(handle)
            self._update()
            return job.state

    def cancel_job(self, handle: JobHandle, grace: float = 2.0) -> bool:
        with self._lock:
            job = self._job(handle)
            self._update()
            if job.state in TERMINAL_JOB_STATES:
                return True
            if job.state is JobState.RUNNING and job.process is not None:
                _stop_process(job.process, grace)
            job.state = JobState.CANCELED
            self._update()
            return True

    def job_info(self, handle: JobHandle) -> dict:
        with self._lock:
            job = self._job(handle)
            return {"state": job.state, "wait": job.wait, "started_at": job.started_at,
                    "error": job.error, "exit_code": job.exit_code}

    def wait_job(self, handle: JobHandle, states=TERMINAL_JOB_STATES, timeout: float | None = None,
                 poll: float = 0.01) -> JobState:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            state = self.job_state(handle)
            if state in states:
                return state
            if deadline is not None and time.monotonic() > deadline:
                raise TimeoutError(f"{handle.job_id} still {state.value}")
            time.sleep(poll)

    def shutdown(self):
        with self._lock:
            self._closed = True
            for job in self._jobs.values():
                if job.state not in TERMINAL_JOB_STATES:
                    if job.process is not None:
                        _stop_process(job.process, 2.0)
                    job.state = JobState.CANCELED

    # -- internals ---------------------------------------------------------

    def _sample_wait(self) -> float:
        return 0.0

    def _job(self, handle) -> _Job:
        job = self._jobs.get(getattr(handle, "job_id", None))
        if job is None or handle.backend != self.name:
            raise UnknownJob(getattr(handle, "job_id", handle))
        return job

    def _running(self) -> int:
        return sum(1 for j in self._jobs.values() if j.state is JobState.RUNNING)

    def _update(self):
        now = self.clock()
        for job in self._jobs.values():
            if job.state is JobState.RUNNING:
                code = job.process.poll()
                if code is not None:
                    job.exit_code = code
                    job.state = JobState.DONE if code == 0 else JobState.FAILED
        for job_id in self._order:
            job = self._jobs[job_id]
            if job.state is not JobState.PENDING:
                continue
            if now - job.handle.submitted_at < job.wait:
                continue
            if self.max_concurrent_jobs is not None and self._running() >= self.max_concurrent_jobs:
                break
            self._start(job, now)
        self._order = [j for j in self._order if self._jobs[j].state is JobState.PENDING]

    def _start(self, job: _Job, now: float):
        try:
            job.process = job.payload() if job.payload is not None else _NullProcess()
        except Exception as exc:
            log.warning("payload of %s failed to start: %s", job.handle.job_id, exc)
            job.error = str(exc)
            job.state = JobState.FAILED
            return
        job.started_at = now
        job.state = JobState.RUNNING


def _stop_process(proc, grace):
    try:
        proc.terminate()
        proc.wait(timeout=grace)
    except Exception:
        try:
            proc.kill()
            proc.wait(timeout=grace)
        except Exception:
            log.warning("could not stop pilot process %r", proc)


class LocalBackend(Backend):
    """No batch queue: jobs start on the first poll after submission."""

    kind = "local"


class SimulatedBatchBackend(Backend):
    """Batch system emulation with a seeded queue-wait distribution."""

    kind = "simbatch"

    def __init__(self, batch: BatchSimConfig, clock: Callable[[], float] = time.monotonic,
                 name: str | None = None):
        super().__init__(clock, batch.max_concurrent_jobs, name)
        self.batch = batch
        self._rng = random.Random(batch.seed)

    def _sample_wait(self) -> float:
        return self.batch.queue_wait.sample(self._rng)


def make_backend(config: ResourceConfig, clock: Callable[[], float] = time.monotonic) -> Backend:
    if config.batch is not None:
        return SimulatedBatchBackend(config.batch, clock, name=f"simbatch.{config.name}.{next(Backend._instances)}")
    return LocalBackend(clock, name=f"local.{config.name}.{next(Backend._instances)}")
