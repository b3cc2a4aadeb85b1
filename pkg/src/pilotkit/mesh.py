"""In-process communication mesh: bulk queues, heartbeats and component
workers.

Queues are the only channel between components. Entity messages and
control messages travel on separate queues.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .exceptions import QueueClosed

log = logging.getLogger(__name__)

DEFAULT_BULK = 1024


class Queue:
    """Many-producer/many-consumer FIFO with all-or-nothing bulk puts."""

    def __init__(self, name: str = "", capacity: int | None = None, bulk_size: int = DEFAULT_BULK):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.name = name
        self.capacity = capacity
        self.bulk_size = bulk_size
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self):
        with self._cond:
            return len(self._items)

    def __repr__(self):
        return f"<Queue {self.name!r} len={len(self)}{' closed' if self._closed else ''}>"

    @property
    def closed(self) -> bool:
        return self._closed

    def put_bulk(self, messages: Iterable, timeout: float | None = None) -> int:
        messages = list(messages)
        if not messages:
            raise ValueError("put_bulk needs at least one message")
        if self.capacity is not None and len(messages) > self.capacity:
            raise ValueError(f"bulk of {len(messages)} exceeds capacity {self.capacity}")
        with self._cond:
            if self.capacity is not None:
                ok = self._cond.wait_for(
                    lambda: self._closed or len(self._items) + len(messages) <= self.capacity, timeout)
                if not ok:
                    raise TimeoutError(f"queue {self.name!r} full")
            if self._closed:
                raise QueueClosed(self.name)
            self._items.extend(messages)
            self._cond.notify_all()
        return len(messages)

    def put(self, message) -> int:
        return self.put_bulk([message])

    def requeue(self, messages: Iterable):
        """Return unprocessed messages to the head of the queue, order kept."""
        messages = list(messages)
        if not messages:
            return
        with self._cond:
            self._items.extendleft(reversed(messages))
            self._cond.notify_all()

    def get_bulk(self, max_n: int | None = None, timeout: float | None = None) -> list:
        """Take between 1 and ``max_n`` messages, or ``[]`` on timeout.

        Raises QueueClosed once the queue is closed and fully drained.
        """
        max_n = self.bulk_size if max_n is None else max_n
        if max_n < 1:
            raise ValueError("max_n must be >= 1")
        with self._cond:
            if not self._items and not self._closed:
                self._cond.wait_for(lambda: self._items or self._closed, timeout)
            if not self._items:
                if self._closed:
                    raise QueueClosed(self.name)
                return []
            n = min(max_n, len(self._items))
            out = [self._items.popleft() for _ in range(n)]
            self._cond.notify_all()
            return out

    def drain(self) -> list:
        with self._cond:
            out = list(self._items)
            self._items.clear()
            self._cond.notify_all()
            return out

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


@dataclass(frozen=True)
class Heartbeat:
    component: str
    sequence: int
    timestamp: float


@dataclass(frozen=True)
class ComponentLost:
    component: str
    last_seen: float
    detected_at: float


class HeartbeatMonitor:
    """Tracks component heartbeats and reports silent components.

    A component that has not beaten for more than ``threshold`` intervals
    is reported once with a ComponentLost message on ``control``.
    """

    def __init__(self, control: Queue | None = None, interval: float = 1.0, threshold: int = 3,
                 clock: Callable[[], float] = time.monotonic):
        self.control = control
        self.interval = interval
        self.threshold = threshold
        self.clock = clock
        self._last: dict[str, Heartbeat] = {}
        self._lost: set[str] = set()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None

    def watch(self, component: str):
        with self._lock:
            self._last[component] = Heartbeat(component, 0, self.clock())
            self._lost.discard(component)

    def forget(self, component: str):
        with self._lock:
            self._last.pop(component, None)
            self._lost.discard(component)

    def beat(self, component: str) -> Heartbeat:
        with self._lock:
            prev = self._last.get(component)
            hb = Heartbeat(component, (prev.sequence if prev else 0) + 1, self.clock())
            self._last[component] = hb
            return hb

    def last(self, component: str) -> Heartbeat | None:
        with self._lock:
            return self._last.get(component)

    def check(self, now: float | None = None) -> list[ComponentLost]:
        now = self.clock() if now is None else now
        lost = []
        with self._lock:
            for name, hb in self._last.items():
                if name not in self._lost and now - hb.timestamp > self.threshold * self.interval:
                    self._lost.add(name)
                    lost.append(ComponentLost(name, hb.timestamp, now))
        if lost and self.control is not None:
            try:
                self.control.put_bulk(lost)
            except QueueClosed:
                pass
        return lost

    def start(self):
        self._thread = threading.Thread(target=self._run, name="heartbeat-monitor", daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.wait(self.interval / 2):
            self.check()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


class Component:
    """A restartable worker bound to input queues.

    Subclasses list their worker loops in ``_workers``. ``stop`` is a
    graceful shutdown; ``kill`` emulates a crash: loops exit at their next
    checkpoint and heartbeats cease. With ``requeue_on_kill`` the messages a
    killed worker had taken but not yet processed go back to its queue
    (acknowledged-queue semantics); otherwise they are lost.
    """

    requeue_on_kill = False
    poll = 0.05

    def __init__(self, name: str, monitor: HeartbeatMonitor | None = None):
        self.name = name
        self.monitor = monitor
        self._stop = threading.Event()
        self._killed = threading.Event()
        self._threads: list[threading.Thread] = []

    def _workers(self) -> list[Callable]:
        raise NotImplementedError

    def start(self):
        if self.monitor is not None:
            self.monitor.watch(self.name)
            self._spawn(self._heartbeat, "heartbeat")
        for i, fn in enumerate(self._workers()):
            self._spawn(fn, f"w{i}")
        return self

    def _spawn(self, fn, suffix):
        t = threading.Thread(target=self._guard, args=(fn,), name=f"{self.name}.{suffix}", daemon=True)
        self._threads.append(t)
        t.start()

    def _guard(self, fn):
        try:
            fn()
        except Exception:
            log.exception("component %s crashed", self.name)
            self._killed.set()

    def _heartbeat(self):
        while not self.halted:
            self.monitor.beat(self.name)
            if self._stop.wait(self.monitor.interval):
                break

    @property
    def halted(self) -> bool:
        return self._stop.is_set() or self._killed.is_set()

    @property
    def alive(self) -> bool:
        return not self.halted and any(t.is_alive() for t in self._threads)

    def consume(self, queue: Queue, handle: Callable, bulk: int | None = None):
        """Standard loop: pull bulks from ``queue`` and handle each message."""
        while not self.halted:
            try:
                msgs = queue.get_bulk(bulk, timeout=self.poll)
            except QueueClosed:
                return
            for i, msg in enumerate(msgs):
                if self._killed.is_set():
                    if self.requeue_on_kill:
                        queue.requeue(msgs[i:])
                    return
                handle(msg)

    def stop(self, timeout: float | None = 5.0):
        self._stop.set()
        self.join(timeout)

    def kill(self):
        self._killed.set()

    def join(self, timeout: float | None = 5.0):
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout)
